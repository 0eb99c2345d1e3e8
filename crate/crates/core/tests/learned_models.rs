//! Small models trained end to end, checked against analytic optima.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sbddm::data::{gen_gaussian_ring, Standardizer};
use sbddm::diffusion::{ddim_sample, strided_timesteps};
use sbddm::score_net::{train, Trained};
use sbddm::{NoiseSchedule, ScoreModel, Tensor, TrainConfig};

const N01_SAMPLES: usize = 5000;
const N01_EPOCHS: usize = 40;
const N01_BUDGET: Duration = Duration::from_secs(120);
const N01_MSE_MAX: f64 = 0.1;
const LARGE_T_COSINE_DISTANCE_MAX: f64 = 0.1;

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

struct N01 {
    trained: Trained,
    elapsed: Duration,
    schedule: NoiseSchedule,
}

fn n01() -> &'static N01 {
    static CELL: OnceLock<N01> = OnceLock::new();
    CELL.get_or_init(|| {
        let schedule = NoiseSchedule::cosine(1000).unwrap();
        let data = Tensor::matrix(N01_SAMPLES, 1, normals(N01_SAMPLES, 1)).unwrap();
        let cfg = TrainConfig {
            epochs: N01_EPOCHS,
            seed: 3,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let trained = train(ScoreModel::default_for(1, 5).unwrap(), &data, &cfg, &schedule).unwrap();
        N01 {
            trained,
            elapsed: start.elapsed(),
            schedule,
        }
    })
}

/// For N(0,1) data x_t ~ N(0,1) at every level and the optimal predictor is σ_t·x_t.
#[test]
fn standard_normal_eps_error_over_low_levels() {
    let m = n01();
    assert!(m.elapsed <= N01_BUDGET, "training took {:?}", m.elapsed);
    let xs = normals(1000, 2);
    let xt = Tensor::matrix(1000, 1, xs.clone()).unwrap();
    let mut total = 0.0;
    let levels: Vec<usize> = (20..=500).collect();
    for &t in &levels {
        let out = m.trained.model.forward_batch(&xt, &vec![t; 1000]).unwrap();
        let sigma = m.schedule.sigma(t);
        total += out.data().iter().zip(&xs).map(|(e, x)| (e - sigma * x).powi(2)).sum::<f64>() / 1000.0;
    }
    let mse = total / levels.len() as f64;
    println!("mean squared eps error {mse:.5} after {:?}", m.elapsed);
    assert!(mse <= N01_MSE_MAX, "mse {mse}");
}

#[test]
fn standard_normal_eps_tracks_the_state_at_large_t() {
    let m = n01();
    let xs = normals(1000, 4);
    let xt = Tensor::matrix(1000, 1, xs.clone()).unwrap();
    for t in [900, 950, 999] {
        let out = m.trained.model.forward_batch(&xt, &vec![t; 1000]).unwrap();
        let dot: f64 = out.data().iter().zip(&xs).map(|(a, b)| a * b).sum();
        let cos = dot / (out.norm_l2() * xt.norm_l2());
        assert!(1.0 - cos <= LARGE_T_COSINE_DISTANCE_MAX, "t={t}: cosine distance {}", 1.0 - cos);
    }
}

#[test]
fn training_beats_the_zero_predictor() {
    let curve = &n01().trained.loss_curve;
    assert!(curve.last().unwrap() < &1.0, "final loss {:?}", curve.last());
    assert!(curve.last() < curve.first());
}

#[test]
fn ring_model_generates_points_on_the_ring() {
    let schedule = NoiseSchedule::cosine(1000).unwrap();
    let ds = gen_gaussian_ring(8, 4.0, 0.3, 2000, 11).unwrap();
    let st = Standardizer::fit(&ds.samples);
    let data = st.apply(&ds.samples).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 300,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = train(ScoreModel::default_for(2, 5).unwrap(), &data, &cfg, &schedule).unwrap().model;
    let levels = strided_timesteps(999, 50);
    let n = 500;
    let z = normals(2 * n, 9);
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let x = ddim_sample(&model, &Tensor::vector(z[2 * i..2 * i + 2].to_vec()), &levels, &schedule, Some(3.0)).unwrap();
        out.extend_from_slice(x.data());
    }
    let raw = st.invert(&Tensor::matrix(n, 2, out).unwrap()).unwrap();
    let near = (0..n).filter(|&i| (raw.row(i)[0].hypot(raw.row(i)[1]) - 4.0).abs() <= 3.0 * 0.3).count();
    let frac = near as f64 / n as f64;
    println!("fraction within 3 sigma of the ring: {frac:.3}");
    assert!(frac >= 0.90, "{frac}");
}
