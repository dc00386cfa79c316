//! Pre-LN transformer blocks shared by the language model, the saliency
//! extractor and the styled generator.

use emodial_nn::{LayerNorm, Linear, Mat, MultiHeadAttention, ParamStore, Tape, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

pub struct BlockOut {
    pub x: Var,
    /// Key and value projections of this block's input positions.
    pub keys: Var,
    pub values: Var,
    /// Self-attention weights, one matrix per head.
    pub weights: Vec<Var>,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, cross: bool, rng: &mut impl Rng) -> Self {
        let cross = cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
                MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng),
            )
        });
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            cross,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), dim, mlp_ratio * dim, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), mlp_ratio * dim, dim, rng),
        }
    }

    /// Self-attention over `past` keys/values (if any) followed by the current
    /// positions, optional cross-attention to `memory`, then the MLP.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<&Mat>,
        past: Option<(Var, Var)>,
        memory: Option<Var>,
    ) -> BlockOut {
        let h = self.ln1.forward(tape, store, x);
        let q = self.attn.query.forward(tape, store, h);
        let k = self.attn.key.forward(tape, store, h);
        let v = self.attn.value.forward(tape, store, h);
        let (all_k, all_v) = match past {
            Some((pk, pv)) => (tape.concat_rows(&[pk, k]), tape.concat_rows(&[pv, v])),
            None => (k, v),
        };
        let a = self.attn.attend(tape, store, q, all_k, all_v, mask);
        let mut x = tape.add(x, a.output);
        if let (Some((ln, cross)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(tape, store, x);
            let c = cross.forward(tape, store, h, mem, None);
            x = tape.add(x, c.output);
        }
        let h = self.ln2.forward(tape, store, x);
        let h = self.mlp_in.forward(tape, store, h);
        let h = tape.gelu(h);
        let h = self.mlp_out.forward(tape, store, h);
        let x = tape.add(x, h);
        BlockOut { x, keys: k, values: v, weights: a.weights }
    }
}
