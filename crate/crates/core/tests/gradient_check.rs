//! Reverse-mode gradients of the score-network loss against central finite
//! differences, over randomly shaped MLPs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbddm::score_net::{Init, ScoreModel};
use sbddm::{Tensor, TensorBundle};

const REL_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn loss(model: &ScoreModel, xs: &Tensor, ts: &[usize], targets: &Tensor) -> f64 {
    model.loss_and_grads(xs, ts, targets).unwrap().0
}

fn perturbed(bundle: &TensorBundle, name: &str, k: usize, delta: f64) -> ScoreModel {
    let mut b = bundle.clone();
    let slot = b.tensors.iter_mut().find(|(n, _)| n == name).unwrap();
    slot.1.data_mut()[k] += delta;
    ScoreModel::from_bundle(&b).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn autodiff_matches_central_differences_on_100_random_mlps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let d = rng.random_range(1..=3);
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
        let embed = 2 * rng.random_range(1..=3);
        let model = ScoreModel::new(d, &hidden, embed, Init::Random, rng.random()).unwrap();
        let n = rng.random_range(1..=4);
        let xs = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let targets = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=1000)).collect();

        let (_, grads) = model.loss_and_grads(&xs, &ts, &targets).unwrap();
        let bundle = model.to_bundle(&[]);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let name = format!("layers.{}.{}", i / 2, if i % 2 == 0 { "weight" } else { "bias" });
            assert_eq!(bundle.get(&name).unwrap().len(), g.len(), "{name}");
            for k in 0..g.len() {
                let up = loss(&perturbed(&bundle, &name, k, H), &xs, &ts, &targets);
                let down = loss(&perturbed(&bundle, &name, k, -H), &xs, &ts, &targets);
                analytic.push(g.data()[k]);
                numeric.push((up - down) / (2.0 * H));
            }
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(rel);
        assert!(rel <= REL_TOL, "instance {instance}: relative error {rel:e}");
    }
    println!("worst relative gradient error {worst:e}");
}
