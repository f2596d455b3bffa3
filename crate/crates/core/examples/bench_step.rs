use spdrdl_core::data::{generate, GenConfig};
use spdrdl_core::loss::{joint_loss, JointConfig, JointInputs};
use spdrdl_core::model::{build, forward, ModelConfig};
use spdrdl_core::ops::{conv2d, Padding};
use spdrdl_core::Tensor;
use std::time::Instant;

fn timeit<R>(name: &str, reps: usize, mut f: impl FnMut() -> R) {
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!(
        "{name}: {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );
}

fn main() {
    let cfg = GenConfig {
        train_counts: [32, 3, 3, 2],
        val_counts: [8, 1, 1, 1],
        ..GenConfig::default()
    };
    let ds = generate(1, &cfg).unwrap();
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let mut shifts = Vec::new();
    for i in 0..16 {
        let s = ds.sample(i % 40);
        let c = spdrdl_core::data::center_crop(&s, 64);
        flat.extend_from_slice(&c.image);
        labels.push(c.label);
        shifts.push(c.p_shift);
    }
    let x = Tensor::<f32>::from_f32(&[16, 1, 64, 64], &flat).unwrap();

    for (name, mcfg) in [
        ("default", ModelConfig::default()),
        (
            "light",
            ModelConfig {
                unet_base_width: 8,
                backbone_widths: vec![16, 32, 64],
                ..ModelConfig::default()
            },
        ),
    ] {
        let params = build::<f32>(&mcfg, 1).unwrap();
        let det = params.detached();
        timeit(&format!("{name} fwd(detached)"), 3, || {
            forward(&det, &x).unwrap()
        });
        timeit(&format!("{name} fwd(tracked)"), 3, || {
            forward(&params, &x).unwrap()
        });
        timeit(&format!("{name} fwd+loss+bwd"), 3, || {
            let out = forward(&params, &x).unwrap();
            let inputs = JointInputs {
                x: &x,
                x_enhanced: Some(&out.x_enhanced),
                probs: &out.probs,
                p_hat: out.p_hat.as_ref().unwrap(),
                labels: &labels,
                shifts: &shifts,
            };
            let (total, _) = joint_loss(&inputs, &JointConfig::default()).unwrap();
            total.backward().unwrap();
            params.zero_grads();
        });
    }
    // conv kernels alone
    let x1 = Tensor::<f32>::from_f32(&[16, 1, 64, 64], &flat).unwrap();
    let k = Tensor::<f32>::zeros(&[16, 1, 3, 3]);
    timeit("conv 1->16 @64", 10, || {
        conv2d(&x1, &k, 1, Padding::Same).unwrap()
    });
    let x32 = Tensor::<f32>::zeros(&[16, 32, 32, 32]);
    let k32 = Tensor::<f32>::zeros(&[32, 32, 3, 3]);
    timeit("conv 32->32 @32", 10, || {
        conv2d(&x32, &k32, 1, Padding::Same).unwrap()
    });
    let x128 = Tensor::<f32>::zeros(&[16, 128, 8, 8]);
    let k128 = Tensor::<f32>::zeros(&[128, 128, 3, 3]);
    timeit("conv 128->128 @8", 10, || {
        conv2d(&x128, &k128, 1, Padding::Same).unwrap()
    });
}
