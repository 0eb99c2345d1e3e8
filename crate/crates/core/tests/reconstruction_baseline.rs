//! The reconstruction-error baseline separates the far-OOD benchmark.

use sbddm::eval::reconstruction_baseline;
use sbddm::pipeline::{build_split, train_on_split, BenchConfig, Overrides};
use sbddm::Tensor;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn id_samples_reconstruct_better_than_uniform_box() {
    let mut cfg = BenchConfig::builtin("B3").unwrap();
    cfg.apply(&Overrides {
        epochs: Some(100),
        ..Overrides::default()
    })
    .unwrap();
    let split = build_split(&cfg).unwrap();
    let (ckpt, _) = train_on_split(&cfg, &split).unwrap();
    let schedule = cfg.schedule().unwrap();
    let recon = cfg.reconstruction.unwrap();
    let errors = |ds: &sbddm::data::Dataset| -> Vec<f64> {
        let xs = split.standardizer.apply(&ds.samples).unwrap();
        (0..xs.rows().min(200))
            .map(|i| {
                let x = Tensor::vector(xs.row(i).to_vec());
                let r = reconstruction_baseline(&ckpt.model, &x, recon.steps, recon.stride, &schedule).unwrap();
                assert_eq!(r.nfe, 2 * recon.steps);
                r.error
            })
            .collect()
    };
    let (id, ood) = (median(errors(&split.test_id)), median(errors(&split.test_ood)));
    println!("median reconstruction error: id {id:.4}, box {ood:.4}");
    assert!(id < ood);
}
