//! Analytic denoiser gradients against central finite differences.

use binderdiff::denoiser::{ComplexState, Denoiser, DenoiserConfig};
use binderdiff::discrete::SequenceState;
use binderdiff::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random_state(rng: &mut ChaCha8Rng, m: usize, n: usize, steps: usize) -> ComplexState<f64> {
    let seq = |rng: &mut ChaCha8Rng, len: usize| {
        SequenceState::from_indices(&(0..len).map(|_| rng.gen_range(0..20)).collect::<Vec<_>>(), 20)
    };
    let coords = |rng: &mut ChaCha8Rng, len: usize| {
        Mat::from_vec(len, 3, (0..len * 3).map(|_| rng.gen_range(-1.5..1.5)).collect())
    };
    ComplexState {
        target_seq: seq(rng, m),
        target_coords: coords(rng, m),
        binder_seq: seq(rng, n),
        binder_coords: coords(rng, n),
        t: rng.gen_range(1..=steps),
    }
}

fn probe_loss(den: &Denoiser<f64>, state: &ComplexState<f64>, gs: &Mat<f64>, gx: &Mat<f64>) -> f64 {
    let p = den.predict_clean(state).unwrap();
    let a: f64 = p.s0_hat.as_slice().iter().zip(gs.as_slice()).map(|(a, b)| a * b).sum();
    let b: f64 = p.x0_hat.as_slice().iter().zip(gx.as_slice()).map(|(a, b)| a * b).sum();
    a + b
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn check_config(cfg: DenoiserConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = random_state(&mut rng, 3, 4, cfg.steps);
    let mut den = Denoiser::<f64>::new(cfg, seed).unwrap();
    let gs = Mat::from_vec(4, 20, (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let gx = Mat::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let pass = den.forward(&state, true).unwrap();
    let grads = den.backward(&pass, &gs, &gx).unwrap();

    let mut worst = 0.0f64;
    for ti in 0..den.params().len() {
        for j in 0..den.params().get(ti).as_slice().len() {
            let orig = den.params().get(ti).as_slice()[j];
            den.params_mut().tensors_mut()[ti].as_mut_slice()[j] = orig + H;
            let up = probe_loss(&den, &state, &gs, &gx);
            den.params_mut().tensors_mut()[ti].as_mut_slice()[j] = orig - H;
            let down = probe_loss(&den, &state, &gs, &gx);
            den.params_mut().tensors_mut()[ti].as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let e = rel_err(grads.params[ti].as_slice()[j], numeric);
            assert!(e < 1e-4, "{}[{j}]: analytic {} numeric {numeric}", den.params().names()[ti], grads.params[ti].as_slice()[j]);
            worst = worst.max(e);
        }
    }

    // Input coordinates, target rows first.
    for r in 0..7 {
        for c in 0..3 {
            let bump = |delta: f64| {
                let mut s = state.clone();
                if r < 3 {
                    s.target_coords.as_mut_slice()[r * 3 + c] += delta;
                } else {
                    s.binder_coords.as_mut_slice()[(r - 3) * 3 + c] += delta;
                }
                probe_loss(&den, &s, &gs, &gx)
            };
            let numeric = (bump(H) - bump(-H)) / (2.0 * H);
            let e = rel_err(grads.coords[(r, c)], numeric);
            assert!(e < 1e-4, "coords[{r},{c}]: analytic {} numeric {numeric}", grads.coords[(r, c)]);
            worst = worst.max(e);
        }
    }
    worst
}

fn tiny() -> DenoiserConfig {
    DenoiserConfig { d_model: 8, heads: 2, k_nn: 3, steps: 20, blocks: 1, attn_layers: 1, causal_layers: 1, ..Default::default() }
}

#[test]
fn single_block_with_causal_layer() {
    check_config(tiny(), 11);
}

#[test]
fn two_blocks_without_causal_stack() {
    check_config(DenoiserConfig { blocks: 2, causal_layers: 0, ..tiny() }, 12);
}

#[test]
fn deep_attention_and_causal_stack() {
    check_config(DenoiserConfig { attn_layers: 2, causal_layers: 2, heads: 4, k_nn: 5, ..tiny() }, 13);
}
