use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fusion::{ConcatFusion, Fusion};
use super::linear::{tanh, tanh_backward, Linear};
use super::FusedFeature;
use crate::data::ModalityBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    /// Complete-modality network, frozen once pretrained.
    Teacher,
    /// Dropout-tolerant inference network carrying the extra regularization head.
    Deployment,
}

impl NetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NetRole::Teacher => "teacher",
            NetRole::Deployment => "deployment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dims: Vec<usize>,
    pub hidden_width: usize,
    /// Width `c` of every encoder output.
    pub feature_width: usize,
    pub fused_width: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }
}

/// Two-layer `tanh` perceptron for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

#[derive(Debug, Clone)]
struct EncoderCache<T> {
    input: Array2<T>,
    hidden: Array2<T>,
    out: Array2<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::init(input, hidden, rng),
            l2: Linear::init(hidden, out, rng),
        }
    }

    pub fn encode(&self, x: &Array2<T>) -> Array2<T> {
        tanh(self.l2.forward(&tanh(self.l1.forward(x))))
    }

    fn forward(&self, x: &Array2<T>) -> EncoderCache<T> {
        let hidden = tanh(self.l1.forward(x));
        let out = tanh(self.l2.forward(&hidden));
        EncoderCache {
            input: x.clone(),
            hidden,
            out,
        }
    }

    fn backward(&self, cache: &EncoderCache<T>, grad_out: &Array2<T>) -> [Array2<T>; 4] {
        let g2 = tanh_backward(&cache.out, grad_out);
        let (dw2, db2, dh) = self.l2.backward(&cache.hidden, &g2);
        let g1 = tanh_backward(&cache.hidden, &dh);
        let (dw1, db1, _) = self.l1.backward(&cache.input, &g1);
        [dw1, db1, dw2, db2]
    }
}

/// Parameter gradients, in the order of [`MultimodalNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<Array2<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn max_abs(&self) -> T {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Output of a forward pass plus what backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T, C> {
    pub fused: Array2<T>,
    pub logits: Array2<T>,
    pub reg_logits: Option<Array2<T>>,
    encoder_caches: Vec<EncoderCache<T>>,
    /// `kept[j][i]` is true when modality `j` survived for sample `i`.
    kept: Vec<Vec<bool>>,
    fusion_cache: C,
}

impl<T: Scalar, C> ForwardPass<T, C> {
    pub fn fused_feature(&self) -> FusedFeature<T> {
        FusedFeature::from_matrix(self.fused.clone())
    }
}

/// Per-modality encoders, a fusion module and prediction heads.
///
/// A teacher has only the task head; a deployment network also carries the
/// regularization head, which shares the fused feature with the task head.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalNet<T, F = ConcatFusion<T>> {
    role: NetRole,
    arch: Architecture,
    pub encoders: Vec<Encoder<T>>,
    pub fusion: F,
    pub head: Linear<T>,
    pub reg_head: Option<Linear<T>>,
}

impl<T: Scalar, F: Fusion<T>> MultimodalNet<T, F> {
    pub fn init<R: Rng + ?Sized>(role: NetRole, arch: Architecture, rng: &mut R) -> Result<Self> {
        if arch.num_modalities() < 2 {
            return Err(Error::config(
                "model.input_dims",
                "need at least 2 modalities",
            ));
        }
        for (field, v) in [
            ("model.hidden_width", arch.hidden_width),
            ("model.feature_width", arch.feature_width),
            ("model.fused_width", arch.fused_width),
            ("model.num_classes", arch.num_classes),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let encoders = arch
            .input_dims
            .iter()
            .map(|&d| Encoder::init(d, arch.hidden_width, arch.feature_width, rng))
            .collect();
        let fusion = F::init(
            arch.num_modalities(),
            arch.feature_width,
            arch.fused_width,
            rng,
        );
        let head = Linear::init(arch.fused_width, arch.num_classes, rng);
        let reg_head = match role {
            NetRole::Teacher => None,
            NetRole::Deployment => Some(Linear::init(arch.fused_width, arch.num_classes, rng)),
        };
        Ok(Self {
            role,
            arch,
            encoders,
            fusion,
            head,
            reg_head,
        })
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn check_inputs(&self, batch: &ModalityBatch<T>) -> Result<()> {
        if batch.num_modalities() != self.arch.num_modalities() {
            return Err(Error::shape(
                "network modalities",
                self.arch.num_modalities(),
                batch.num_modalities(),
            ));
        }
        for (x, &d) in batch.features().iter().zip(&self.arch.input_dims) {
            if x.ncols() != d {
                return Err(Error::shape("network input width", d, x.ncols()));
            }
        }
        if self.role == NetRole::Teacher && !batch.is_complete() {
            return Err(Error::Contract(
                "the teacher only accepts complete-modality batches".into(),
            ));
        }
        Ok(())
    }

    /// Encodes each modality, zeroes encoded rows of dropped modalities, fuses
    /// and applies the heads.
    pub fn forward(&self, batch: &ModalityBatch<T>) -> Result<ForwardPass<T, F::Cache>> {
        self.check_inputs(batch)?;
        let m = self.arch.num_modalities();
        let kept: Vec<Vec<bool>> = (0..m)
            .map(|j| batch.patterns().iter().map(|p| p.is_present(j)).collect())
            .collect();
        let encoder_caches: Vec<_> = self
            .encoders
            .iter()
            .zip(batch.features())
            .map(|(enc, x)| enc.forward(x))
            .collect();
        let encoded: Vec<Array2<T>> = encoder_caches
            .iter()
            .zip(&kept)
            .map(|(cache, keep)| {
                let mut e = cache.out.clone();
                for (mut row, &k) in e.rows_mut().into_iter().zip(keep) {
                    if !k {
                        row.fill(T::zero());
                    }
                }
                e
            })
            .collect();
        let (fused, fusion_cache) = self.fusion.forward(&encoded)?;
        let logits = self.head.forward(&fused);
        let reg_logits = self.reg_head.as_ref().map(|h| h.forward(&fused));
        Ok(ForwardPass {
            fused,
            logits,
            reg_logits,
            encoder_caches,
            kept,
            fusion_cache,
        })
    }

    /// Fused teacher feature and logits for a complete batch.
    pub fn forward_teacher(
        &self,
        batch: &ModalityBatch<T>,
    ) -> Result<(FusedFeature<T>, Array2<T>)> {
        if self.role != NetRole::Teacher {
            return Err(Error::Contract(
                "forward_teacher called on a deployment network".into(),
            ));
        }
        let pass = self.forward(batch)?;
        Ok((FusedFeature::from_matrix(pass.fused), pass.logits))
    }

    /// Fused feature, task logits and regularization logits under each
    /// sample's own dropout pattern.
    pub fn forward_deployment(
        &self,
        batch: &ModalityBatch<T>,
    ) -> Result<(FusedFeature<T>, Array2<T>, Array2<T>)> {
        if self.role != NetRole::Deployment {
            return Err(Error::Contract(
                "forward_deployment called on a teacher network".into(),
            ));
        }
        let pass = self.forward(batch)?;
        let reg = pass
            .reg_logits
            .expect("deployment networks carry a regularization head");
        Ok((FusedFeature::from_matrix(pass.fused), pass.logits, reg))
    }

    /// Task-head logits only.
    pub fn predict(&self, batch: &ModalityBatch<T>) -> Result<Array2<T>> {
        Ok(self.forward(batch)?.logits)
    }

    /// Backpropagates upstream gradients on the fused feature, the task logits
    /// and the regularization logits into every parameter.
    pub fn backward(
        &self,
        pass: &ForwardPass<T, F::Cache>,
        grad_fused: Option<&Array2<T>>,
        grad_logits: &Array2<T>,
        grad_reg_logits: Option<&Array2<T>>,
    ) -> Result<Gradients<T>> {
        if grad_logits.dim() != pass.logits.dim() {
            return Err(Error::shape(
                "backward logits",
                format!("{:?}", pass.logits.dim()),
                format!("{:?}", grad_logits.dim()),
            ));
        }
        let (dw_head, db_head, mut d_fused) = self.head.backward(&pass.fused, grad_logits);
        if let Some(g) = grad_fused {
            if g.dim() != d_fused.dim() {
                return Err(Error::shape(
                    "backward fused",
                    format!("{:?}", d_fused.dim()),
                    format!("{:?}", g.dim()),
                ));
            }
            d_fused += g;
        }
        let reg_grads = match (&self.reg_head, grad_reg_logits) {
            (Some(head), Some(g)) => {
                let (dw, db, dz) = head.backward(&pass.fused, g);
                d_fused += &dz;
                Some([dw, db])
            }
            (Some(head), None) => Some([
                Array2::zeros(head.weight.raw_dim()),
                Array2::zeros(head.bias.raw_dim()),
            ]),
            (None, Some(_)) => {
                return Err(Error::Contract("teacher has no regularization head".into()))
            }
            (None, None) => None,
        };

        let (fusion_grads, mut encoded_grads) = self.fusion.backward(&pass.fusion_cache, &d_fused);
        let mut grads = Vec::new();
        for ((enc, cache), (g, keep)) in self
            .encoders
            .iter()
            .zip(&pass.encoder_caches)
            .zip(encoded_grads.iter_mut().zip(&pass.kept))
        {
            for (mut row, &k) in g.rows_mut().into_iter().zip(keep) {
                if !k {
                    row.fill(T::zero());
                }
            }
            grads.extend(enc.backward(cache, g));
        }
        grads.extend(fusion_grads);
        grads.push(dw_head);
        grads.push(db_head);
        if let Some(r) = reg_grads {
            grads.extend(r);
        }
        Ok(Gradients(grads))
    }

    /// Named parameters in a fixed order shared with [`Gradients`].
    pub fn params(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        for (j, enc) in self.encoders.iter().enumerate() {
            out.push((format!("encoder{j}.l1.weight"), &enc.l1.weight));
            out.push((format!("encoder{j}.l1.bias"), &enc.l1.bias));
            out.push((format!("encoder{j}.l2.weight"), &enc.l2.weight));
            out.push((format!("encoder{j}.l2.bias"), &enc.l2.bias));
        }
        out.extend(self.fusion.params());
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        if let Some(h) = &self.reg_head {
            out.push(("reg_head.weight".into(), &h.weight));
            out.push(("reg_head.bias".into(), &h.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = Vec::new();
        for enc in &mut self.encoders {
            out.extend(enc.l1.params_mut());
            out.extend(enc.l2.params_mut());
        }
        out.extend(self.fusion.params_mut());
        out.extend(self.head.params_mut());
        if let Some(h) = &mut self.reg_head {
            out.extend(h.params_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Hash of every parameter's bit pattern; changes iff some parameter changes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, p) in self.params() {
            name.hash(&mut h);
            p.shape().hash(&mut h);
            for v in p {
                v.to_f64_lossless().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DropoutPattern;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn arch() -> Architecture {
        Architecture {
            input_dims: vec![3, 2, 4],
            hidden_width: 5,
            feature_width: 4,
            fused_width: 6,
            num_classes: 3,
        }
    }

    fn random_batch(b: usize, seed: u64) -> ModalityBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = arch()
            .input_dims
            .iter()
            .map(|&d| Array2::from_shape_fn((b, d), |_| rng.sample(StandardNormal)))
            .collect();
        let labels = (0..b).map(|i| i % 3).collect();
        ModalityBatch::complete(feats, labels).unwrap()
    }

    fn net(role: NetRole) -> MultimodalNet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut n = MultimodalNet::init(role, arch(), &mut rng).unwrap();
        // nonzero biases so the zero-substitution path is distinguishable
        for p in n.params_mut() {
            if p.nrows() == 1 {
                p.mapv_inplace(|_| 0.1);
            }
        }
        n
    }

    #[test]
    fn shapes_and_determinism() {
        let t = net(NetRole::Teacher);
        let batch = random_batch(5, 0);
        let (z, y) = t.forward_teacher(&batch).unwrap();
        assert_eq!(y.dim(), (5, 3));
        assert_eq!(z.shape(), &[5, 6]);
        let (z2, y2) = t.forward_teacher(&batch).unwrap();
        assert_eq!((z, y), (z2, y2));
        let single = random_batch(1, 1);
        let d = net(NetRole::Deployment);
        let (_, yd, yr) = d.forward_deployment(&single).unwrap();
        assert_eq!((yd.dim(), yr.dim()), ((1, 3), (1, 3)));
    }

    #[test]
    fn teacher_rejects_dropped_modalities() {
        let t = net(NetRole::Teacher);
        let batch = random_batch(2, 0);
        let p = DropoutPattern::new(vec![true, false, true]).unwrap();
        let dropped = batch.with_pattern(&p).unwrap();
        assert!(matches!(
            t.forward_teacher(&dropped),
            Err(Error::Contract(_))
        ));
        assert!(t.forward_deployment(&batch).is_err());
    }

    #[test]
    fn row_permutation_commutes() {
        let t = net(NetRole::Teacher);
        let batch = random_batch(4, 3);
        let perm = [2, 0, 3, 1];
        let (z, _) = t.forward_teacher(&batch).unwrap();
        let (zp, _) = t.forward_teacher(&batch.select(&perm)).unwrap();
        let zm = z.to_matrix();
        let zpm = zp.to_matrix();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(zpm.row(i), zm.row(src));
        }
    }

    #[test]
    fn dropped_inputs_do_not_matter() {
        let d = net(NetRole::Deployment);
        let only_first = DropoutPattern::new(vec![true, false, false]).unwrap();
        let a = random_batch(3, 5).with_pattern(&only_first).unwrap();
        let mut feats = a.features().to_vec();
        feats[1].mapv_inplace(|v| v * 100.0 + 7.0);
        feats[2].fill(-3.0);
        let b = ModalityBatch::new(feats, a.labels().to_vec(), a.patterns().to_vec()).unwrap();
        assert_eq!(d.predict(&a).unwrap(), d.predict(&b).unwrap());
        let full = random_batch(3, 5);
        assert_ne!(d.predict(&a).unwrap(), d.predict(&full).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = net(NetRole::Deployment);
        let mut batch = random_batch(4, 9);
        let patterns = vec![
            DropoutPattern::full(3),
            DropoutPattern::new(vec![false, true, false]).unwrap(),
            DropoutPattern::new(vec![true, false, true]).unwrap(),
            DropoutPattern::new(vec![false, false, true]).unwrap(),
        ];
        batch = batch.with_patterns(patterns).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let wz = Array2::from_shape_fn((4, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let wy = Array2::from_shape_fn((4, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let wr = Array2::from_shape_fn((4, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let objective = |n: &MultimodalNet<f64>| {
            let p = n.forward(&batch).unwrap();
            (&p.fused * &wz).sum() + (&p.logits * &wy).sum() + (p.reg_logits.unwrap() * &wr).sum()
        };
        let pass = net.forward(&batch).unwrap();
        let grads = net.backward(&pass, Some(&wz), &wy, Some(&wr)).unwrap();
        assert_eq!(grads.0.len(), net.params().len());
        let h = 1e-6;
        for (pi, g) in grads.0.iter().enumerate() {
            for idx in 0..g.len().min(6) {
                let mut up = net.clone();
                let mut dn = net.clone();
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                up.params_mut()[pi][[r, c]] += h;
                dn.params_mut()[pi][[r, c]] -= h;
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                let an = g[[r, c]];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {} idx {idx}: fd {fd} vs analytic {an}",
                    net.params()[pi].0
                );
            }
        }
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = net(NetRole::Teacher);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.head.bias[[0, 0]] += 1e-12;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn f32_network_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = MultimodalNet::<f32>::init(NetRole::Deployment, arch(), &mut rng).unwrap();
        let batch = ModalityBatch::complete(
            arch()
                .input_dims
                .iter()
                .map(|&d| Array2::ones((2, d)))
                .collect(),
            vec![0, 1],
        )
        .unwrap();
        assert!(n.predict(&batch).unwrap().iter().all(|v| v.is_finite()));
    }
}
