//! What the gradient reversal layer does to an encoder's gradients. A
//! linear encoder feeds both alignment heads; the same batch is run with
//! and without reversal and the encoder gradients are compared.
//!
//! cargo run --release --example gradient_reversal

use anyhow::Result;
use hps_autograd::nn::{Linear, ParamStore};
use hps_autograd::{Graph, Tensor};
use hps_core::iam::{loss_adv, IamBundle, IamTask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 6;
const BATCH: usize = 8;

/// Encoder weight gradient and adversarial loss for one pass.
fn encoder_grad(store: &ParamStore, encoder: &Linear, iam: &IamBundle, x: &Tensor, reverse: bool) -> (Vec<f64>, f64) {
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let f = encoder.forward(&mut g, store, input);
    let fmap = g.reshape(f, &[BATCH, DIM, 1, 1]);
    let segments: Vec<Vec<usize>> = (0..BATCH).map(|i| vec![i]).collect();
    let own: Vec<usize> = (0..BATCH).collect();
    let labels: Vec<usize> = (0..BATCH).map(|i| i % 3).collect();
    let adv = loss_adv(&mut g, store, iam, fmap, &segments, Some(f), &own, &labels, reverse);
    let total = adv.total(&mut g);
    let grads = g.backward(total);
    let w = grads.param(encoder.weight).expect("encoder is on the loss path");
    (w.data().to_vec(), g.value(total).item())
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_vec(&[BATCH, 4], (0..BATCH * 4).map(|_| rng.random_range(-1.0..1.0)).collect());

    // forward is the identity
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.grad_reverse(v, 0.7);
    println!("forward unchanged: {}", g.value(r) == g.value(v));

    for alpha in [0.0, 0.3, 1.0] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let encoder = Linear::new(&mut store, "enc", 4, DIM, &mut rng);
        let iam = IamBundle::new(IamTask::Detection, DIM, DIM, 3, 16, alpha, &mut store, &mut rng);
        let (plain, loss_plain) = encoder_grad(&store, &encoder, &iam, &x, false);
        let (reversed, loss_rev) = encoder_grad(&store, &encoder, &iam, &x, true);
        let worst = plain
            .iter()
            .zip(&reversed)
            .map(|(p, r)| (r + alpha * p).abs())
            .fold(0.0, f64::max);
        println!(
            "alpha {alpha:.1}: loss {loss_plain:.6} vs {loss_rev:.6}, first grads {:+.5} vs {:+.5}, max |rev + alpha*plain| {worst:.1e}",
            plain[0], reversed[0]
        );
    }
    Ok(())
}
