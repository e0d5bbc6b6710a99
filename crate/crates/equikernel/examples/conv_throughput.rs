//! Measures effective conv2d throughput (forward and backward) on shapes
//! representative of the gait backbone, to size training configs for a
//! wall-clock budget. Run with `cargo run --release --example
//! conv_throughput` (or the dev profile, which this workspace also builds
//! with opt-level 3).

use std::time::Instant;

use equikernel::ops::conv::{conv2d, conv2d_backward, ConvSpec};
use equikernel::{shape, Tensor};

fn bench(name: &str, t: usize, cin: usize, cout: usize, h: usize, w: usize, stride: usize) {
    let spec = ConvSpec::new(3, stride, 1, 1).unwrap();
    let x = Tensor::<f32>::from_fn(shape![T = t, C = cin, H = h, W = w], |i| {
        ((i * 2654435761) % 1000) as f32 * 1e-3 - 0.5
    });
    let wt = Tensor::<f32>::from_fn(shape![C = cout, C = cin, H = 3, W = 3], |i| {
        ((i * 40503) % 997) as f32 * 1e-3 - 0.5
    });
    let y = conv2d(&x, &wt, None, &spec).unwrap();
    let (ho, wo) = {
        let d = y.shape().dims();
        (d[2], d[3])
    };
    let flops_fwd = 2.0 * (t * cout * ho * wo * cin * 9) as f64;

    let reps = (2e9 / flops_fwd).clamp(1.0, 50.0) as usize;
    let start = Instant::now();
    for _ in 0..reps {
        let _ = conv2d(&x, &wt, None, &spec).unwrap();
    }
    let fwd = start.elapsed().as_secs_f64() / reps as f64;

    let dy = Tensor::<f32>::full(y.shape().clone(), 1e-3);
    let start = Instant::now();
    for _ in 0..reps {
        let _ = conv2d_backward(&x, &wt, false, &spec, &dy).unwrap();
    }
    let bwd = start.elapsed().as_secs_f64() / reps as f64;

    println!(
        "{name:<28} fwd {:>7.1} ms ({:>5.2} GF/s)   bwd {:>7.1} ms ({:>5.2} GF/s)",
        fwd * 1e3,
        flops_fwd / fwd / 1e9,
        bwd * 1e3,
        2.0 * flops_fwd / bwd / 1e9,
    );
}

fn main() {
    println!("conv2d throughput (single sequence, k=3, pad 1)");
    // Full-width backbone shapes (one 30-frame sequence).
    bench("full stem  1->64   64x44", 30, 1, 64, 64, 44, 1);
    bench("full s1   64->64   64x44", 30, 64, 64, 64, 44, 1);
    bench("full s2  128->128  32x22", 30, 128, 128, 32, 22, 1);
    bench("full s4  512->512  16x11", 30, 512, 512, 16, 11, 1);
    // Toy-width candidates.
    bench("toy  s1    4->4    64x44", 30, 4, 4, 64, 44, 1);
    bench("toy  s2    4->8    64x44/2", 30, 4, 8, 64, 44, 2);
    bench("toy  s2b   8->8    32x22", 30, 8, 8, 32, 22, 1);
    bench("toy  s3b  16->16   16x11", 30, 16, 16, 16, 11, 1);
    bench("toy  s4   20->20   16x11", 30, 20, 20, 16, 11, 1);
    bench("toy  s4b  32->32   16x11", 30, 32, 32, 16, 11, 1);
}
