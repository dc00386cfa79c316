//! A small sequence classifier assembled from the public layers: gradients,
//! optimization and checkpoint round trips through the crate's API only.

use emodial_nn::{
    causal_mask, Adam, AdamConfig, Checkpoint, GradBuffer, GruCell, LayerNorm, Linear, Mat, MultiHeadAttention,
    ParamStore, Tape,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Net {
    store: ParamStore,
    input: Linear,
    norm: LayerNorm,
    attention: MultiHeadAttention,
    gru: GruCell,
    output: Linear,
}

impl Net {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = Linear::new(&mut store, "input", 3, 4, &mut rng);
        let norm = LayerNorm::new(&mut store, "norm", 4);
        let attention = MultiHeadAttention::new(&mut store, "attn", 4, 2, &mut rng);
        let gru = GruCell::new(&mut store, "gru", 4, 5, &mut rng);
        let output = Linear::new(&mut store, "out", 5, 2, &mut rng);
        Self { store, input, norm, attention, gru, output }
    }

    /// Summed negative log-likelihood of each sequence's label.
    fn loss(&self, tape: &mut Tape, data: &[(Mat, usize)]) -> emodial_nn::Var {
        let mut total = None;
        for (x, label) in data {
            let x = tape.constant(x.clone());
            let h = self.input.forward(tape, &self.store, x);
            let h = self.norm.forward(tape, &self.store, h);
            let n = tape.value(h).rows();
            let mask = causal_mask(n, n, 0);
            let a = self.attention.forward(tape, &self.store, h, h, Some(&mask)).output;
            let h = tape.add(h, a);
            let states = self.gru.run(tape, &self.store, h, false);
            let pooled = tape.max_rows(states);
            let logits = self.output.forward(tape, &self.store, pooled);
            let lp = tape.log_softmax_rows(logits);
            let nll = tape.nll(lp, &[*label]);
            total = Some(match total {
                None => nll,
                Some(t) => tape.add(t, nll),
            });
        }
        total.expect("non-empty data")
    }

    fn value(&self, data: &[(Mat, usize)]) -> f64 {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, data);
        tape.value(loss).item()
    }

    fn gradient(&self, data: &[(Mat, usize)]) -> (f64, GradBuffer) {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, data);
        let grads = tape.backward(loss);
        let mut buf = GradBuffer::zeros_like(&self.store);
        buf.accumulate(&tape, &grads);
        (tape.value(loss).item(), buf)
    }
}

/// Label 1 when the first feature sums positive over the sequence.
fn dataset(count: usize, seed: u64) -> Vec<(Mat, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=5);
            let x = Mat::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let label = usize::from((0..n).map(|r| x.get(r, 0)).sum::<f64>() > 0.0);
            (x, label)
        })
        .collect()
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    let mut net = Net::new(3);
    let data = dataset(4, 1);
    let (_, grads) = net.gradient(&data);
    let h = 1e-5;
    let ids: Vec<_> = net.store.ids().collect();
    let mut checked = 0;
    for id in ids {
        for idx in (0..net.store.get(id).len()).step_by(3) {
            let x = net.store.get(id).data()[idx];
            net.store.get_mut(id).data_mut()[idx] = x + h;
            let up = net.value(&data);
            net.store.get_mut(id).data_mut()[idx] = x - h;
            let down = net.value(&data);
            net.store.get_mut(id).data_mut()[idx] = x;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).data()[idx];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(err < 1e-5, "{} [{idx}]: analytic {analytic} numeric {numeric}", net.store.name(id));
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn adam_fits_the_task_and_checkpoints_round_trip() {
    let mut net = Net::new(5);
    let train = dataset(64, 2);
    let before = net.value(&train);
    let mut adam = Adam::new(AdamConfig { lr: 0.02, ..AdamConfig::default() }, &net.store);
    for _ in 0..60 {
        let (_, mut grads) = net.gradient(&train);
        grads.scale(1.0 / train.len() as f64);
        adam.step(&mut net.store, &grads);
    }
    let after = net.value(&train);
    assert!(after < 0.5 * before, "loss {before} -> {after}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    Checkpoint::from_store("net", "abc", serde_json::json!({ "layers": 5 }), &net.store).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    loaded.expect_kind("net").unwrap();
    assert!(loaded.expect_kind("other").is_err());
    let mut fresh = Net::new(99);
    assert_ne!(fresh.value(&train).to_bits(), after.to_bits());
    loaded.restore_into(&mut fresh.store).unwrap();
    assert_eq!(fresh.value(&train).to_bits(), after.to_bits());
}

#[test]
fn restoring_into_a_different_layout_fails() {
    let net = Net::new(1);
    let ck = Checkpoint::from_store("net", "", serde_json::Value::Null, &net.store);
    let mut other = ParamStore::new();
    other.add_zeros("input.weight", 2, 2);
    assert!(ck.restore_into(&mut other).is_err());
}
