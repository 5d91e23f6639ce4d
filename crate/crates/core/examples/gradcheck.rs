// scratch gradient check
use scsim::matrix::Matrix;
use scsim::mlp::{self, MlpConfig, MlpModel};
use scsim::noise::GemmBackend;

fn main() {
    let cfg = MlpConfig {
        layer_sizes: vec![4, 3, 2],
        batch_size: 3,
        init_sigma: 0.5,
        seed: 42,
        ..MlpConfig::default()
    };
    let mut model = MlpModel::init(&cfg).unwrap();
    let x = Matrix::from_fn(4, 3, |i, j| 0.15 + 0.2 * ((i * 3 + j) % 5) as f64);
    let t = Matrix::from_fn(2, 3, |i, j| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });

    let backend = GemmBackend::exact();
    let cache = mlp::forward(&mut model, &x, &backend).unwrap();
    let (_, delta) = mlp::softmax_cross_entropy(cache.scores(), &t).unwrap();
    let grads = mlp::backward(&mut model, &cache, delta, &backend).unwrap();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    for l in 0..model.n_weight_layers() {
        let (rows, cols) = (model.weights()[l].rows(), model.weights()[l].cols());
        for i in 0..rows {
            for j in 0..cols {
                let orig = model.weights()[l].at(i, j);
                model.weights_mut()[l].set(i, j, orig + eps);
                let lp = mlp::exact_loss(&model, &x, &t).unwrap();
                model.weights_mut()[l].set(i, j, orig - eps);
                let lm = mlp::exact_loss(&model, &x, &t).unwrap();
                model.weights_mut()[l].set(i, j, orig);
                let numeric = (lp - lm) / (2.0 * eps);
                // batch-mean loss vs summed gradients
                let analytic = grads.d_weights[l].at(i, j) / 3.0;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
                if rel > worst { worst = rel; }
                println!("W[{l}][{i}][{j}] analytic {analytic:+.9} numeric {numeric:+.9} rel {rel:.2e}");
            }
        }
        for j in 0..cols {
            let orig = model.biases()[l][j];
            model.biases_mut()[l][j] = orig + eps;
            let lp = mlp::exact_loss(&model, &x, &t).unwrap();
            model.biases_mut()[l][j] = orig - eps;
            let lm = mlp::exact_loss(&model, &x, &t).unwrap();
            model.biases_mut()[l][j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.d_biases[l][j] / 3.0;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            if rel > worst { worst = rel; }
            println!("B[{l}][{j}] analytic {analytic:+.9} numeric {numeric:+.9} rel {rel:.2e}");
        }
    }
    println!("worst relative error: {worst:.3e}");
}
