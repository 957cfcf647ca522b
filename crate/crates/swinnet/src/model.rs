//! Full two-stream saliency network.
//!
//! Two independent encoder streams (appearance and the auxiliary modality,
//! e.g. depth or thermal) feed a per-level cross-modality re-calibration,
//! an edge-aware branch over the three shallow appearance levels, and a
//! top-down decoder with an edge-guided saliency head. The forward pass
//! returns saliency logits and, when the edge path is on, edge logits,
//! both at input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{fuse_modalities, Decoder};
use crate::edge::EdgeModule;
use crate::error::{Error, Result};
use crate::nn::{ParamFn, ParamVisit};
use crate::sacr::Sacr;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 96 px, narrow: runs in seconds on a CPU.
    Toy,
    /// 384 px, Swin-B widths.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// complete model
    None,
    /// drop the edge branch and its auxiliary head
    NoEdge,
    /// bypass cross-modality re-calibration (features pass through)
    Dem,
    /// keep per-level fusion but skip top-down aggregation
    FuseOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub scale: Scale,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            scale: Scale::Toy,
            ablation: Ablation::None,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            scale: Scale::Full,
            ablation: Ablation::None,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        match self.scale {
            Scale::Toy => BackboneConfig::toy(),
            Scale::Full => BackboneConfig::full(),
        }
    }

    /// Width of each reduced edge branch; the concatenated edge feature is
    /// three times this.
    pub fn edge_branch(&self) -> usize {
        match self.scale {
            Scale::Toy => 8,
            Scale::Full => 32,
        }
    }
}

pub struct ModelOutput<T: Elem> {
    /// saliency logits, N,1,H,W at input resolution
    pub s_logits: Tensor<T>,
    /// edge logits, absent under the no-edge ablation
    pub se_logits: Option<Tensor<T>>,
}

pub struct SwinNet<T: Elem> {
    pub cfg: ModelConfig,
    pub rgb: Backbone<T>,
    pub aux: Backbone<T>,
    pub sacr: [Sacr<T>; 4],
    pub edge: Option<EdgeModule<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Elem> SwinNet<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = cfg.backbone();
        let dims = [
            bb.stage_dim(0),
            bb.stage_dim(1),
            bb.stage_dim(2),
            bb.stage_dim(3),
        ];
        let rgb = Backbone::new(&bb, &mut rng)?;
        let aux = Backbone::new(&bb, &mut rng)?;
        let sacr = [
            Sacr::new(dims[0], &mut rng),
            Sacr::new(dims[1], &mut rng),
            Sacr::new(dims[2], &mut rng),
            Sacr::new(dims[3], &mut rng),
        ];
        let edge = (cfg.ablation != Ablation::NoEdge).then(|| {
            EdgeModule::new([dims[0], dims[1], dims[2]], cfg.edge_branch(), &mut rng)
        });
        let edge_dim = edge.as_ref().map_or(0, |e| e.out_dim());
        let decoder = Decoder::new(dims, edge_dim, &mut rng);
        Ok(SwinNet {
            cfg: cfg.clone(),
            rgb,
            aux,
            sacr,
            edge,
            decoder,
        })
    }

    /// rgb, aux: N,3,S,S with S the configured input size.
    pub fn forward(&mut self, rgb: &Tensor<T>, aux: &Tensor<T>, train: bool) -> Result<ModelOutput<T>> {
        if rgb.shape() != aux.shape() {
            return Err(Error::invalid(format!(
                "modality shapes differ: {:?} vs {:?}",
                rgb.shape(),
                aux.shape()
            )));
        }
        let p_rgb = self.rgb.forward(rgb)?;
        let p_aux = self.aux.forward(aux)?;

        let mut fused = Vec::with_capacity(4);
        let mut f_c = Vec::with_capacity(4);
        for i in 0..4 {
            let state = if self.cfg.ablation == Ablation::Dem {
                self.sacr[i].passthrough(&p_rgb.st[i], &p_aux.st[i])?
            } else {
                self.sacr[i].forward(&p_rgb.st[i], &p_aux.st[i])?
            };
            fused.push(fuse_modalities(&state.f_c, &state.f_d)?);
            f_c.push(state.f_c);
        }
        let fused: [Tensor<T>; 4] = fused.try_into().map_err(|_| Error::invalid("level count"))?;

        let edge_feat = match &mut self.edge {
            Some(e) => Some(e.forward(&f_c[0], &f_c[1], &f_c[2], train)?),
            None => None,
        };
        let aggregate = self.cfg.ablation != Ablation::FuseOnly;
        let (s_logits, se_logits) = self
            .decoder
            .forward(&fused, edge_feat.as_ref(), aggregate)?;
        Ok(ModelOutput { s_logits, se_logits })
    }
}

impl<T: Elem> ParamVisit<T> for SwinNet<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        self.rgb.visit(&format!("{prefix}rgb."), f);
        self.aux.visit(&format!("{prefix}aux."), f);
        for (i, s) in self.sacr.iter_mut().enumerate() {
            s.visit(&format!("{prefix}sacr{}.", i + 1), f);
        }
        if let Some(e) = &mut self.edge {
            e.visit(&format!("{prefix}edge."), f);
        }
        self.decoder.visit(&format!("{prefix}decoder."), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;

    fn toy_model(ablation: Ablation) -> SwinNet<f32> {
        let cfg = ModelConfig {
            scale: Scale::Toy,
            ablation,
        };
        SwinNet::new(&cfg, 42).unwrap()
    }

    fn toy_inputs() -> (Tensor<f32>, Tensor<f32>) {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        (
            trunc_normal(&[1, 3, 96, 96], 1.0, &mut r),
            trunc_normal(&[1, 3, 96, 96], 1.0, &mut r),
        )
    }

    #[test]
    fn toy_forward_shapes() {
        let mut m = toy_model(Ablation::None);
        let (rgb, aux) = toy_inputs();
        let out = m.forward(&rgb, &aux, false).unwrap();
        assert_eq!(out.s_logits.shape(), &[1, 1, 96, 96]);
        assert_eq!(out.se_logits.unwrap().shape(), &[1, 1, 96, 96]);
    }

    #[test]
    fn ablations_run_and_match_interfaces() {
        let (rgb, aux) = toy_inputs();
        let mut no_edge = toy_model(Ablation::NoEdge);
        let out = no_edge.forward(&rgb, &aux, false).unwrap();
        assert_eq!(out.s_logits.shape(), &[1, 1, 96, 96]);
        assert!(out.se_logits.is_none());

        for ab in [Ablation::Dem, Ablation::FuseOnly] {
            let mut m = toy_model(ab);
            let out = m.forward(&rgb, &aux, false).unwrap();
            assert_eq!(out.s_logits.shape(), &[1, 1, 96, 96]);
            assert!(out.se_logits.is_some());
        }
    }

    #[test]
    fn same_seed_gives_identical_models() {
        let mut a = toy_model(Ablation::None);
        let mut b = toy_model(Ablation::None);
        let (rgb, aux) = toy_inputs();
        let oa = a.forward(&rgb, &aux, false).unwrap();
        let ob = b.forward(&rgb, &aux, false).unwrap();
        assert_eq!(oa.s_logits.data(), ob.s_logits.data());
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = ModelConfig::toy();
        let mut a = SwinNet::<f32>::new(&cfg, 1).unwrap();
        let mut b = SwinNet::<f32>::new(&cfg, 2).unwrap();
        let (rgb, aux) = toy_inputs();
        let oa = a.forward(&rgb, &aux, false).unwrap();
        let ob = b.forward(&rgb, &aux, false).unwrap();
        assert_ne!(oa.s_logits.data(), ob.s_logits.data());
    }

    #[test]
    fn rejects_mismatched_modalities() {
        let mut m = toy_model(Ablation::None);
        let rgb = Tensor::<f32>::ones(&[1, 3, 96, 96]);
        let aux = Tensor::<f32>::ones(&[2, 3, 96, 96]);
        assert!(m.forward(&rgb, &aux, false).is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_nonempty() {
        let mut m = toy_model(Ablation::None);
        let mut names = std::collections::HashSet::new();
        let mut count = 0usize;
        m.visit("", &mut |name: &str, t: &mut Tensor<f32>, _train| {
            assert!(!t.is_empty());
            assert!(names.insert(name.to_string()), "duplicate name {name}");
            count += 1;
        });
        assert!(count > 100);
    }
}
