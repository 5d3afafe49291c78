#![allow(dead_code)]

use paritylab::numerics::RngStream;
use paritylab::parity_data::{gen_sequence, sample_secret_set, BitSequence, OrderPolicy, ParityTask};
use paritylab::simplified_model::{
    backward, forward, init_embeddings, sequence_loss, EmbeddingTable, SimplifiedParams,
};
use paritylab::standard_model::{gpt_init, gpt_loss_and_backward, GPTConfig, GPTParams};
use paritylab::numerics::Matrix;

pub const FD_STEP: f64 = 1e-5;
/// Entries whose analytic and numeric values are both below this are
/// compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;
const KINK_GAP: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Random simplified model with nontrivial attention, away from every
/// ReLU and hinge kink on `seq`.
fn kink_free_instance(rng: &mut RngStream, task: &ParityTask, emb: &EmbeddingTable, m: usize) -> (SimplifiedParams, BitSequence) {
    let d = emb.d();
    loop {
        let a = Matrix::from_fn(d, d, |_, _| 0.5 * rng.normal());
        let w = Matrix::from_fn(2 * m, 2 * d, |_, _| 0.5 * rng.normal());
        let h = (0..2 * m).map(|r| if r < m { 1.0 } else { -1.0 } / (2 * m) as f64).collect();
        let params = SimplifiedParams::from_parts(a, w, h, 0.0, None).expect("shapes");
        let seq = gen_sequence(task, true, rng);
        let tr = forward(&params, emb, seq.bits()).expect("forward");
        let near_relu = tr.preact.data().iter().any(|z| z.abs() < KINK_GAP);
        let near_hinge = task.scored_positions(true).iter().any(|&p| {
            let sign = if seq.bit(p + 1) == 1 { -1.0 } else { 1.0 };
            (sign * tr.y[p - 1] + 1.0).abs() < KINK_GAP
        });
        if !near_relu && !near_hinge {
            return (params, seq);
        }
    }
}

/// Largest relative error between backward and central differences over
/// `instances` random kink-free (params, sequence) pairs.
pub fn simplified_fd_worst(instances: usize, seed: u64) -> f64 {
    let (n, k, d, m) = (8, 3, 16, 8);
    let mut rng = RngStream::new(seed, 0);
    let task = sample_secret_set(n, k, OrderPolicy::Ascending, &mut rng).unwrap();
    let emb = init_embeddings(n + k + 1, d, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (params, seq) = kink_free_instance(&mut rng, &task, &emb, m);
        let tr = forward(&params, &emb, seq.bits()).unwrap();
        let g = backward(&params, &tr, &seq, true).unwrap();
        let loss_at = |p: &SimplifiedParams| {
            let t = forward(p, &emb, seq.bits()).unwrap();
            sequence_loss(&t, &seq, true).unwrap()
        };
        for idx in 0..d * d {
            let mut plus = params.clone();
            plus.a.data_mut()[idx] += FD_STEP;
            let mut minus = params.clone();
            minus.a.data_mut()[idx] -= FD_STEP;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.da.data()[idx], fd));
        }
        for idx in 0..2 * m * 2 * d {
            let mut plus = params.clone();
            plus.w.data_mut()[idx] += FD_STEP;
            let mut minus = params.clone();
            minus.w.data_mut()[idx] -= FD_STEP;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.dw.data()[idx], fd));
        }
    }
    worst
}

pub fn micro_gpt() -> GPTConfig {
    GPTConfig { layers: 1, heads: 1, d_model: 8, d_ff: 32, max_len: 16, ln_eps: 1e-5, tie_output: false }
}

fn randomized_gpt(cfg: &GPTConfig, rng: &mut RngStream) -> GPTParams {
    let mut p = gpt_init(cfg, rng).unwrap();
    for x in p.data_mut() {
        *x += 0.3 * rng.normal();
    }
    p
}

/// Same check for the standard model on random CoT sequences.
pub fn standard_fd_worst(cfg: &GPTConfig, instances: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0);
    let task = sample_secret_set(8, 3, OrderPolicy::Ascending, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let p = randomized_gpt(cfg, &mut rng);
        let seq = gen_sequence(&task, true, &mut rng);
        let scored = task.scored_positions(true);
        let tokens = seq.bits();
        let (_, g) = gpt_loss_and_backward(&p, tokens, &scored).unwrap();
        for idx in 0..p.len() {
            let mut plus = p.clone();
            plus.data_mut()[idx] += FD_STEP;
            let mut minus = p.clone();
            minus.data_mut()[idx] -= FD_STEP;
            let lp = gpt_loss_and_backward(&plus, tokens, &scored).unwrap().0;
            let lm = gpt_loss_and_backward(&minus, tokens, &scored).unwrap().0;
            worst = worst.max(rel_err(g.data()[idx], (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    worst
}
