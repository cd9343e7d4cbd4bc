use cotrain_core::data::{generate, SynthSpec};

fn main() {
    let out = std::env::args().nth(1).expect("output dir");
    let d = generate(&SynthSpec { num_images: 12, num_val: 0, ..SynthSpec::default() }).unwrap();
    d.save(std::path::Path::new(&out)).unwrap();
    for c in 1..4u8 {
        let present = d.train.iter().filter(|s| s.mask.contains(&c)).count();
        println!("class {c} present in {present}/12");
    }
}
