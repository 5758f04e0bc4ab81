//! Gated attention over patch embeddings and attention-weighted pooling.

use crate::error::{Error, Result};
use crate::numeric::{Activation, BoundParams, Graph, ParamStore, SeededRng, Tensor, Var};

/// Attention weights `a_ij` and the gated embeddings `h_ij` they pool.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    pub weights: Vec<f64>,
    /// `[N, D_h]`
    pub gated: Tensor,
}

/// Slide-level embedding `W_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideEmbedding(pub Vec<f64>);

/// Graph handles for one attention pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[N, D_h]`
    pub gated: Var,
    /// `[N]`
    pub weights: Var,
}

/// `h = tanh(p W_p + b_p) ⊙ σ(p W_g + b_g)`, `a = softmax_j(h w)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatedAttention {
    pub in_dim: usize,
    pub hidden: usize,
}

impl GatedAttention {
    pub const PREFIX: &'static str = "attn";

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        store.init_linear("attn.proj", self.in_dim, self.hidden, rng);
        store.init_linear("attn.gate", self.in_dim, self.hidden, rng);
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let w = (0..self.hidden).map(|_| rng.uniform_range(-bound, bound)).collect();
        store.insert("attn.score", Tensor::new(vec![self.hidden, 1], w).expect("sized"));
    }

    pub fn forward(&self, g: &mut Graph, params: &mut BoundParams, patches: Var) -> Result<AttentionVars> {
        let (n, d) = g.value(patches).as_matrix_dims()?;
        if n == 0 {
            return Err(Error::Data("attention over an empty bag".into()));
        }
        if d != self.in_dim {
            return Err(Error::shape(format!(
                "attention input has {d} columns, expected {}",
                self.in_dim
            )));
        }
        let proj = params.linear(g, "attn.proj", patches)?;
        let proj = g.activation(proj, Activation::Tanh)?;
        let gate = params.linear(g, "attn.gate", patches)?;
        let gate = g.activation(gate, Activation::Sigmoid)?;
        let gated = g.mul(proj, gate)?;
        let w = params.var(g, "attn.score")?;
        let logits = g.matmul(gated, w)?;
        let logits = g.reshape(logits, &[n])?;
        let weights = g.softmax(logits);
        Ok(AttentionVars { gated, weights })
    }
}

/// `f_ρ`: Linear → ReLU → Dropout applied to the pooled gated embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlideProjection {
    pub in_dim: usize,
    pub out: usize,
    pub dropout: f64,
}

impl SlideProjection {
    pub const PREFIX: &'static str = "rho";

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        store.init_linear("rho.fc", self.in_dim, self.out, rng);
    }

    /// Pools `Σ_j a_j h_j` and projects it to `[1, out]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut BoundParams,
        attn: AttentionVars,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let pooled = g.attention_pool(attn.weights, attn.gated)?;
        let pooled = g.reshape(pooled, &[1, self.in_dim])?;
        let x = params.linear(g, "rho.fc", pooled)?;
        let x = g.activation(x, Activation::Relu)?;
        g.dropout(x, self.dropout, training, rng)
    }
}

/// Attention scores for a fused patch matrix `[N, in_dim]`.
pub fn compute_attention(attn: &GatedAttention, store: &ParamStore, patches: &Tensor) -> Result<AttentionScores> {
    let mut g = Graph::new();
    let mut params = BoundParams::new(store);
    let p = g.constant(patches.clone());
    let vars = attn.forward(&mut g, &mut params, p)?;
    Ok(AttentionScores {
        weights: g.value(vars.weights).data().to_vec(),
        gated: g.value(vars.gated).clone(),
    })
}

/// Attention-weighted pooling followed by `f_ρ`.
pub fn pool_slide(
    proj: &SlideProjection,
    store: &ParamStore,
    scores: &AttentionScores,
    training: bool,
    rng: &mut SeededRng,
) -> Result<SlideEmbedding> {
    let mut g = Graph::new();
    let mut params = BoundParams::new(store);
    let vars = AttentionVars {
        gated: g.constant(scores.gated.clone()),
        weights: g.constant(Tensor::vector(scores.weights.clone())),
    };
    let w = proj.forward(&mut g, &mut params, vars, training, rng)?;
    Ok(SlideEmbedding(g.value(w).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (GatedAttention, SlideProjection, ParamStore, SeededRng) {
        let attn = GatedAttention { in_dim: 6, hidden: 5 };
        let proj = SlideProjection {
            in_dim: 5,
            out: 4,
            dropout: 0.1,
        };
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        attn.init(&mut store, &mut rng);
        proj.init(&mut store, &mut rng);
        (attn, proj, store, rng)
    }

    fn random_patches(rng: &mut SeededRng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn singleton_bag_gets_full_weight() {
        let (attn, proj, store, mut rng) = setup(1);
        let p = random_patches(&mut rng, 1, 6);
        let s = compute_attention(&attn, &store, &p).unwrap();
        assert_eq!(s.weights, vec![1.0]);

        // pooled vector equals h_1: compare against projecting h_1 directly
        let direct = AttentionScores {
            weights: vec![1.0],
            gated: s.gated.clone(),
        };
        let w = pool_slide(&proj, &store, &s, false, &mut rng).unwrap();
        let w2 = pool_slide(&proj, &store, &direct, false, &mut rng).unwrap();
        assert_eq!(w, w2);
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let h = g.constant(s.gated.clone());
        let pooled = g.attention_pool(a, h).unwrap();
        assert_eq!(g.value(pooled).data(), s.gated.data());
    }

    #[test]
    fn identical_rows_split_evenly() {
        let (attn, _, store, mut rng) = setup(2);
        let p = random_patches(&mut rng, 1, 6);
        let two = Tensor::from_rows(&[p.row(0).to_vec(), p.row(0).to_vec()]).unwrap();
        let s = compute_attention(&attn, &store, &two).unwrap();
        assert_eq!(s.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn weights_form_a_distribution() {
        let (attn, _, store, mut rng) = setup(3);
        for n in [1, 2, 7, 50] {
            let p = random_patches(&mut rng, n, 6);
            let s = compute_attention(&attn, &store, &p).unwrap();
            let total: f64 = s.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(s.weights.iter().all(|a| *a >= 0.0));
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let (attn, _, store, mut rng) = setup(4);
        let p = random_patches(&mut rng, 3, 5);
        assert!(matches!(compute_attention(&attn, &store, &p), Err(Error::Shape(_))));
    }
}
