use std::time::Instant;

use cotrain_core::tensor::{Graph, Tensor};

fn main() {
    for &(cin, cout, hw, k) in &[(1, 8, 64, 3), (8, 8, 64, 3), (16, 8, 64, 3), (32, 16, 32, 3), (64, 32, 16, 3), (64, 64, 8, 3), (8, 4, 64, 1)] {
        let x = Tensor::<f32>::from_fn(&[4, cin, hw, hw], |i| (i % 7) as f32 * 0.1);
        let w = Tensor::<f32>::from_fn(&[cout, cin, k, k], |i| (i % 5) as f32 * 0.01);
        let reps = 10;
        let t0 = Instant::now();
        let mut fwd = 0.0;
        for _ in 0..reps {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let t = Instant::now();
            let y = g.conv2d(xv, wv, None, k / 2, 1).unwrap();
            fwd += t.elapsed().as_secs_f64();
            let s = g.sum(y);
            g.backward(s).unwrap();
        }
        let total = t0.elapsed().as_secs_f64();
        let flops = 2.0 * 4.0 * (hw * hw * cin * cout * k * k) as f64;
        println!(
            "{cin:>3}->{cout:<3} @{hw:<3} k{k}: fwd {:.2} ms ({:.1} GF/s), total {:.2} ms",
            fwd * 1e3 / reps as f64,
            flops / (fwd / reps as f64) / 1e9,
            total * 1e3 / reps as f64
        );
    }
}
