//! Omic self-normalizing encoder and the patch-level early-fusion encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, BoundParams, Graph, ParamStore, SeededRng, Tensor, Var};

/// Raw per-patient molecular profile.
#[derive(Clone, Debug, PartialEq)]
pub struct OmicVector {
    pub patient_id: String,
    pub values: Vec<f64>,
}

/// Encoded omic embedding `o_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedOmic(pub Vec<f64>);

/// Precomputed patch embeddings for one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub slide_id: String,
    /// `[N, d_e]`
    pub embeddings: Tensor,
    /// Tile origins, one per patch.
    pub coords: Option<Vec<(i32, i32)>>,
}

impl PatchBag {
    pub fn new(slide_id: impl Into<String>, embeddings: Tensor, coords: Option<Vec<(i32, i32)>>) -> Result<Self> {
        let (n, _) = match embeddings.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape(format!("patch bag must be [N, d_e], got {s:?}"))),
        };
        if n == 0 {
            return Err(Error::Data("patch bag is empty".into()));
        }
        if !embeddings.is_finite() {
            return Err(Error::Data("patch bag contains non-finite values".into()));
        }
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::Data(format!("{} coordinates for {n} patches", c.len())));
            }
        }
        Ok(PatchBag {
            slide_id: slide_id.into(),
            embeddings,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// The bag with patches reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> PatchBag {
        PatchBag {
            slide_id: self.slide_id.clone(),
            embeddings: self.embeddings.select_rows(order),
            coords: self
                .coords
                .as_ref()
                .map(|c| order.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Joint per-patch embeddings `p_ij`, `[N, d_o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPatchMatrix(pub Tensor);

/// Per-feature z-scoring with statistics from the training fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmicNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl OmicNormalizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Data("cannot fit omic statistics on zero samples".into()))?;
        let f = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; f];
        for r in rows {
            if r.len() != f {
                return Err(Error::shape(format!("omic row of width {} in a {f}-feature table", r.len())));
            }
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(OmicNormalizer { mean, std })
    }

    pub fn identity(features: usize) -> Self {
        OmicNormalizer {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Two fully connected layers, each followed by ELU and alpha dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnnEncoder {
    pub in_features: usize,
    pub hidden: usize,
    pub out: usize,
    pub dropout: f64,
}

impl SnnEncoder {
    pub const PREFIX: &'static str = "snn";

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        store.init_linear("snn.fc1", self.in_features, self.hidden, rng);
        store.init_linear("snn.fc2", self.hidden, self.out, rng);
    }

    /// Encodes `x: [1, F]` (or `[F]`) into `[1, out]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut BoundParams,
        x: Var,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let width = g.value(x).numel();
        if width != self.in_features {
            return Err(Error::shape(format!(
                "omic vector has {width} features, encoder expects {}",
                self.in_features
            )));
        }
        let x = g.reshape(x, &[1, width])?;
        let mut h = x;
        for layer in ["snn.fc1", "snn.fc2"] {
            h = params.linear(g, layer, h)?;
            h = g.activation(h, Activation::Elu)?;
            h = g.alpha_dropout(h, self.dropout, training, rng)?;
        }
        Ok(h)
    }
}

/// `f_E`: Linear → ReLU → Dropout → Linear over `z_ij = [e_ij, o_i]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyFusion {
    pub patch_dim: usize,
    pub omic_dim: usize,
    pub hidden: usize,
    pub out: usize,
    pub dropout: f64,
}

impl EarlyFusion {
    pub const PREFIX: &'static str = "early";

    pub fn joint_width(&self) -> usize {
        self.patch_dim + self.omic_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        store.init_linear("early.fc1", self.joint_width(), self.hidden, rng);
        store.init_linear("early.fc2", self.hidden, self.out, rng);
    }

    /// Builds `z = [e | o ⊗ 1_N]` for `bag: [N, d_e]` and `omic: [1, d_o]`.
    pub fn joint_input(&self, g: &mut Graph, bag: Var, omic: Var) -> Result<Var> {
        let (n, d) = g.value(bag).as_matrix_dims()?;
        if d != self.patch_dim {
            return Err(Error::shape(format!(
                "patch embeddings have {d} columns, early fusion expects {}",
                self.patch_dim
            )));
        }
        if g.value(omic).numel() != self.omic_dim {
            return Err(Error::shape(format!(
                "omic embedding has width {}, early fusion expects {}",
                g.value(omic).numel(),
                self.omic_dim
            )));
        }
        let cloned = g.repeat_rows(omic, n)?;
        g.concat_cols(bag, cloned)
    }

    /// Maps `bag: [N, d_e]` and `omic: [1, d_o]` to `p: [N, out]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut BoundParams,
        bag: Var,
        omic: Var,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let z = self.joint_input(g, bag, omic)?;
        let h = params.linear(g, "early.fc1", z)?;
        let h = g.activation(h, Activation::Relu)?;
        let h = g.dropout(h, self.dropout, training, rng)?;
        params.linear(g, "early.fc2", h)
    }
}

/// Encodes a raw omic vector outside of training.
pub fn snn_encode(
    encoder: &SnnEncoder,
    store: &ParamStore,
    raw: &OmicVector,
    training: bool,
    rng: &mut SeededRng,
) -> Result<EncodedOmic> {
    if raw.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("omic vector '{}' has non-finite values", raw.patient_id)));
    }
    let mut g = Graph::new();
    let mut params = BoundParams::new(store);
    let x = g.constant(Tensor::vector(raw.values.clone()));
    let o = encoder.forward(&mut g, &mut params, x, training, rng)?;
    Ok(EncodedOmic(g.value(o).data().to_vec()))
}

/// Fuses an encoded omic embedding into every patch of `bag`.
pub fn early_fuse(
    fusion: &EarlyFusion,
    store: &ParamStore,
    bag: &PatchBag,
    omic: &EncodedOmic,
    training: bool,
    rng: &mut SeededRng,
) -> Result<FusedPatchMatrix> {
    let mut g = Graph::new();
    let mut params = BoundParams::new(store);
    let e = g.constant(bag.embeddings.clone());
    let o = g.constant(Tensor::vector(omic.0.clone()));
    let o = g.reshape(o, &[1, omic.0.len()])?;
    let p = fusion.forward(&mut g, &mut params, e, o, training, rng)?;
    Ok(FusedPatchMatrix(g.value(p).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_snn() -> SnnEncoder {
        SnnEncoder {
            in_features: 12,
            hidden: 8,
            out: 6,
            dropout: 0.25,
        }
    }

    fn small_fusion() -> EarlyFusion {
        EarlyFusion {
            patch_dim: 5,
            omic_dim: 6,
            hidden: 7,
            out: 6,
            dropout: 0.1,
        }
    }

    fn random_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn snn_full_width_output_is_256() {
        let enc = SnnEncoder {
            in_features: 8000,
            hidden: 1024,
            out: 256,
            dropout: 0.25,
        };
        let mut rng = SeededRng::new(0);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng);
        let raw = OmicVector {
            patient_id: "p".into(),
            values: random_vec(&mut rng, 8000),
        };
        let o = snn_encode(&enc, &store, &raw, false, &mut rng).unwrap();
        assert_eq!(o.0.len(), 256);
    }

    #[test]
    fn snn_zero_weights_give_zeros() {
        let enc = small_snn();
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let raw = OmicVector {
            patient_id: "p".into(),
            values: random_vec(&mut rng, 12),
        };
        let o = snn_encode(&enc, &store, &raw, false, &mut rng).unwrap();
        assert!(o.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn snn_training_is_seed_deterministic() {
        let enc = small_snn();
        let mut rng = SeededRng::new(2);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng);
        let raw = OmicVector {
            patient_id: "p".into(),
            values: random_vec(&mut rng, 12),
        };
        let a = snn_encode(&enc, &store, &raw, true, &mut SeededRng::new(11)).unwrap();
        let b = snn_encode(&enc, &store, &raw, true, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snn_rejects_wrong_width() {
        let enc = small_snn();
        let mut rng = SeededRng::new(3);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng);
        let raw = OmicVector {
            patient_id: "p".into(),
            values: vec![0.0; 11],
        };
        assert!(matches!(snn_encode(&enc, &store, &raw, false, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn early_fuse_full_widths() {
        let fusion = EarlyFusion {
            patch_dim: 1024,
            omic_dim: 256,
            hidden: 512,
            out: 256,
            dropout: 0.1,
        };
        let mut rng = SeededRng::new(4);
        let mut store = ParamStore::new();
        fusion.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let e = g.constant(Tensor::matrix(3, 1024, random_vec(&mut rng, 3 * 1024)).unwrap());
        let o = g.constant(Tensor::matrix(1, 256, random_vec(&mut rng, 256)).unwrap());
        let z = fusion.joint_input(&mut g, e, o).unwrap();
        assert_eq!(g.shape(z), &[3, 1280]);

        let bag = PatchBag::new("s", g.value(e).clone(), None).unwrap();
        let p = early_fuse(&fusion, &store, &bag, &EncodedOmic(g.value(o).data().to_vec()), false, &mut rng).unwrap();
        assert_eq!(p.0.shape(), &[3, 256]);
    }

    #[test]
    fn early_fuse_is_row_equivariant() {
        let fusion = small_fusion();
        let mut rng = SeededRng::new(5);
        let mut store = ParamStore::new();
        fusion.init(&mut store, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 5)).collect();
        rows[3] = rows[1].clone();
        let bag = PatchBag::new("s", Tensor::from_rows(&rows).unwrap(), None).unwrap();
        let omic = EncodedOmic(random_vec(&mut rng, 6));
        let p = early_fuse(&fusion, &store, &bag, &omic, false, &mut rng).unwrap();
        assert_eq!(p.0.row(1), p.0.row(3));

        let order = [2, 0, 3, 1];
        let q = early_fuse(&fusion, &store, &bag.permuted(&order), &omic, false, &mut rng).unwrap();
        assert_eq!(q.0, p.0.select_rows(&order));
    }

    #[test]
    fn early_fuse_width_mismatch() {
        let fusion = small_fusion();
        let mut rng = SeededRng::new(6);
        let mut store = ParamStore::new();
        fusion.init(&mut store, &mut rng);
        let bag = PatchBag::new("s", Tensor::zeros(&[2, 4]), None).unwrap();
        let omic = EncodedOmic(vec![0.0; 6]);
        assert!(matches!(
            early_fuse(&fusion, &store, &bag, &omic, false, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn patch_bag_validation() {
        assert!(PatchBag::new("s", Tensor::zeros(&[0, 3]), None).is_err());
        assert!(PatchBag::new("s", Tensor::zeros(&[2, 3]), Some(vec![(0, 0)])).is_err());
        let mut bad = Tensor::zeros(&[1, 2]);
        bad.data_mut()[0] = f64::INFINITY;
        assert!(PatchBag::new("s", bad, None).is_err());
    }

    #[test]
    fn normalizer_z_scores_training_columns() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let norm = OmicNormalizer::fit(&refs).unwrap();
        assert_eq!(norm.apply(&[1.0, 5.0]), vec![-1.0, 0.0]);
        assert_eq!(norm.apply(&[3.0, 7.0]), vec![1.0, 2.0]);
    }
}
