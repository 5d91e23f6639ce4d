// scratch: decisive coupling runs at criterion-8 scale
use scsim::data::{Dataset, Split};
use scsim::matrix::Matrix;
use scsim::mlp::{self, Gradients, MlpConfig, MlpModel};
use scsim::noise::GemmBackend;
use scsim::rng::RngState;
use std::path::Path;

fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 { 1.0 / (1.0 + (-y).exp()) } else { let e = y.exp(); e / (1.0 + e) }
}

fn run(name: &str, softmax: bool, init_sigma: f64, seed: u64) {
    let fixtures = Path::new("crates/core/tests/fixtures/mnist");
    let train = Dataset::load_dir(fixtures, Split::Train).unwrap().subset(5000);
    let test = Dataset::load_dir(fixtures, Split::Test).unwrap();
    let cfg = MlpConfig { epochs: 10, seed, init_sigma, ..MlpConfig::default() };
    let mut model = MlpModel::init(&cfg).unwrap();
    let backend = GemmBackend::exact();
    let shuffle_root = RngState::new(cfg.seed).substream(1);
    let mut final_err = 1.0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let rng = shuffle_root.substream(epoch as u64);
        for i in (1..order.len()).rev() {
            let j = (rng.bits_at(i as u64) % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train.batch_inputs(batch);
            let t = train.batch_targets(batch);
            let cache = mlp::forward(&mut model, &x, &backend).unwrap();
            let scores = cache.scores();
            let classes = scores.rows() as f64;
            let (loss, delta) = if softmax {
                mlp::softmax_cross_entropy(scores, &t).unwrap()
            } else {
                let mut d = Matrix::zeros(scores.rows(), scores.cols());
                let mut l = 0.0;
                for i in 0..scores.rows() {
                    for j in 0..scores.cols() {
                        let p = sigmoid(scores.at(i, j)).clamp(1e-12, 1.0 - 1e-12);
                        let tv = t.at(i, j);
                        d.set(i, j, (p - tv) / classes);
                        l -= (tv * p.ln() + (1.0 - tv) * (1.0 - p).ln()) / classes;
                    }
                }
                (l / scores.cols() as f64, d)
            };
            loss_sum += loss * batch.len() as f64;
            let grads: Gradients = mlp::backward(&mut model, &cache, delta, &backend).unwrap();
            mlp::sgd_update(&mut model, &grads, epoch, &cfg).unwrap();
        }
        let (_, rate) = mlp::evaluate(&model, &test).unwrap();
        final_err = rate;
        if epoch >= 7 {
            println!("{name}: epoch {epoch} loss {:.4} err {:.2}%", loss_sum / train.len() as f64, rate * 100.0);
        }
    }
    println!("{name}: FINAL {:.2}%\n", final_err * 100.0);
}

fn main() {
    run("softmax std.1 seed7", true, 0.1, 7);
    run("softmax std.316 seed1", true, 0.31622776601683794, 1);
    run("softmax std.316 seed2", true, 0.31622776601683794, 2);
}
