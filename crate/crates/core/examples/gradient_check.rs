//! Compares reverse-mode gradients of the full hybrid loss with central
//! finite differences on a two-layer model.
//!
//! cargo run --example gradient_check

use speckle_lab::loss::{HybridLoss, LossConfig};
use speckle_lab::model::{Model, ModelConfig};
use speckle_lab::nn_engine::{Shape, Tensor};
use speckle_lab::speckle_sim::{gamma_speckle_field, SpeckleConfig};

fn loss_of(model: &Model, loss: &HybridLoss, noisy: &Tensor, clean: &Tensor) -> (f64, Tensor) {
    let mut m = model.clone();
    let (pred, _) = m.forward_train(noisy).unwrap();
    (loss.evaluate(noisy, &pred, clean).unwrap().total, pred)
}

/// Histogram cell of every predicted-noise value; the soft histogram is
/// piecewise linear, so finite differences are only valid when no value
/// changes cell between the two probes.
fn cells(loss: &HybridLoss, noisy: &Tensor, pred: &Tensor) -> Vec<i64> {
    let (w, last) = (loss.bins().width(), loss.bins().count as f64 - 1.0);
    let floor = loss.cfg.division_floor;
    noisy
        .data()
        .iter()
        .zip(pred.data())
        .map(|(y, x)| (y / x.max(floor) / w - 0.5).clamp(0.0, last).floor() as i64)
        .collect()
}

fn main() -> speckle_lab::Result<()> {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_channels: 3,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 5)?;
    let shape = Shape::new(2, 1, 8, 8);
    let clean = Tensor::from_fn(shape, |i| 0.3 + 0.5 * ((i * 37 % 17) as f64 / 17.0));
    let noise = gamma_speckle_field(SpeckleConfig::new(1, 9)?, 16, 8)?;
    let noisy = Tensor::from_vec(shape, clean.data().iter().zip(noise.data()).map(|(x, n)| x * n).collect())?;

    for (label, lambda) in [("MSE only", 0.0), ("MSE + KL", 1.0)] {
        let loss = HybridLoss::new(LossConfig { lambda, ..LossConfig::default() }, 1)?;
        let mut m = model.clone();
        let (pred, tape) = m.forward_train(&noisy)?;
        let out = loss.evaluate(&noisy, &pred, &clean)?;
        let grads = m.backward(&tape, &out.grad)?;
        let analytic: Vec<f64> = grads.buffers().concat();

        // Central differences carry an O(h^2) truncation error, so the gap
        // should shrink roughly 100x from the first step to the second.
        for h in [1e-5, 1e-6] {
            let (mut worst, mut count, mut skipped) = (0.0f64, 0, 0);
            for (k, &a) in analytic.iter().enumerate() {
                let perturbed = |delta: f64| {
                    let mut p = model.clone();
                    let mut seen = 0;
                    for buf in p.network_mut().parameters_mut() {
                        if k < seen + buf.len() {
                            buf[k - seen] += delta;
                            break;
                        }
                        seen += buf.len();
                    }
                    loss_of(&p, &loss, &noisy, &clean)
                };
                let ((fp, pp), (fm, pm)) = (perturbed(h), perturbed(-h));
                if lambda > 0.0 && cells(&loss, &noisy, &pp) != cells(&loss, &noisy, &pm) {
                    skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * h);
                let scale = a.abs().max(numeric.abs());
                if scale > 1e-6 {
                    worst = worst.max((a - numeric).abs() / scale);
                    count += 1;
                }
            }
            println!(
                "{label}, step {h:.0e}: total {:.6}, {count} parameters checked ({skipped} skipped at histogram kinks), worst relative error {worst:.2e}",
                out.total
            );
        }
    }
    Ok(())
}
