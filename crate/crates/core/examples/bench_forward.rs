use std::time::Instant;

use cotrain_core::rng::{self, Purpose};
use cotrain_core::segnet::{SegModel, SegModelConfig};
use cotrain_core::tensor::{Float, Graph, Tensor};

fn bench<T: Float>(label: &str) {
    let model = SegModel::<T>::init(SegModelConfig::default(), 1).unwrap();
    let x = Tensor::from_fn(&[4, 1, 64, 64], |i| T::of(((i * 31) % 97) as f64 / 97.0));
    let mut r = rng::stream(1, Purpose::Dropout, 0);
    let reps = 5;
    let start = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let p = b.forward(&mut g, xv, true, &mut r).unwrap();
        let s = g.mean(p);
        g.backward(s).unwrap();
    }
    println!("{label} fwd+bwd batch 4: {:.1} ms", start.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let start = Instant::now();
    for _ in 0..reps {
        model.predict(&x).unwrap();
    }
    println!("{label} fwd batch 4: {:.1} ms", start.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    bench::<f32>("f32");
    bench::<f64>("f64");
}
