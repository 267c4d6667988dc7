use latred::harness::*;
use latred::policy::PolicyParams;

fn flat(p: &PolicyParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|(_, t)| t.data.clone()).collect()
}

fn main() {
    let n = 4;
    let spec = DatasetSpec { n, train_per_epoch: 1000, test_count: 20, seed: 1 };
    let mut prev: Option<Vec<f64>> = None;
    for epochs in [5usize, 10, 15, 20, 30] {
        let mut cfg = TrainConfig::new(1);
        cfg.epochs = epochs;
        cfg.eval_every = 0;
        let out = train(&spec, &cfg, &mut |_| {}).unwrap();
        let f = flat(&out.params);
        if let Some(p) = &prev {
            let delta: f64 =
                p.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            println!("epochs {epochs}: delta from previous checkpoint {delta:.6}");
        }
        prev = Some(f);
    }
}
