//! The full network: shared encoder feeding the SR decoder, saliency head and detector.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::GtBox;
use crate::deformable::TokenLayout;
use crate::detection::{self, DetLosses, Detection, DetectionOutput, Detector, DetectorConfig, LossTerms, LossWeights};
use crate::encoder::{EncoderConfig, FeaturePyramid, SharedEncoder};
use crate::error::{shape_err, Result};
use crate::filter::FilterConfig;
use crate::params::{Init, ParamGroup, ParamStore};
use crate::saliency::{self, LevelGeometry, SaliencyConfig, SaliencyHead, SaliencyPyramid};
use crate::sr::{self, SrConfig, SrDecoder};
use crate::tensor::Array;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_sr: SrConfig,
    pub saliency: SaliencyConfig,
    pub filter: FilterConfig,
    pub detector: DetectorConfig,
}

impl ModelConfig {
    /// A very small network for tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 4,
                window_size: 4,
                stage_depths: vec![1, 1, 1, 1],
                stage_channels: vec![8, 16, 32, 64],
                num_heads: vec![1, 2, 2, 4],
                mlp_ratio: 2.0,
            },
            detector: DetectorConfig {
                d_model: 16,
                heads: 2,
                points: 2,
                num_queries: 8,
                ffn_dim: 32,
                num_classes: 2,
                max_grid: 16,
                ..DetectorConfig::default()
            },
            saliency: SaliencyConfig {
                hidden: 8,
                ..SaliencyConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.detector.validate(&self.filter, self.encoder.stage_channels.len())?;
        Ok(())
    }
}

/// Forward results for one LR image.
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub saliency: SaliencyPyramid,
    pub detection: DetectionOutput,
    /// Unclamped ×2 image, when requested.
    pub sr: Option<Var>,
    pub layout: TokenLayout,
}

/// Scalar loss values of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub giou: f64,
    pub sa: f64,
    pub sr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SdcoNet {
    pub config: ModelConfig,
    pub encoder: SharedEncoder,
    pub sr: SrDecoder,
    pub saliency: SaliencyHead,
    pub detector: Detector,
}

impl SdcoNet {
    /// Registers every parameter in `store`: encoder as `feat`, SR decoder as
    /// `sr`, saliency head and detector as `det`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(store, rng, ParamGroup::Feat);
        let encoder = SharedEncoder::new(&mut init, &config.encoder)?;
        let e = &config.encoder;
        let sr = SrDecoder::new(
            &mut init.with_group(ParamGroup::Sr),
            &config.decoder_sr,
            &e.stage_channels,
            &e.num_heads,
            e.window_size,
            e.mlp_ratio,
        )?;
        let mut det_init = init.with_group(ParamGroup::Det);
        let saliency = SaliencyHead::new(&mut det_init, &config.saliency, &e.stage_channels)?;
        let detector = Detector::new(&mut det_init, &config.detector, &config.filter, &e.stage_channels)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            sr,
            saliency,
            detector,
        })
    }

    /// Token layout of the detector for an `h × w` LR input.
    pub fn layout(&self, h: usize, w: usize) -> TokenLayout {
        let dims = self.config.encoder.level_dims(h, w);
        TokenLayout::new(LevelGeometry::pyramid(&dims, self.config.encoder.patch_size, h, w))
    }

    pub fn forward(&self, g: &mut Graph<'_>, lr: &Array, with_sr: bool) -> Result<ModelOutput> {
        let s = lr.shape();
        if s.len() != 3 || s[2] != 3 {
            return shape_err(format!("expected an [H, W, 3] image, got {s:?}"));
        }
        let layout = self.layout(s[0], s[1]);
        let x = g.constant(lr.clone());
        let pyramid = self.encoder.encode(g, x)?;
        let sal = self.saliency.forward(g, &pyramid)?;
        // ranking uses the saliency values only; no gradient flows through selection
        let scores: Vec<f64> = sal.maps.iter().flat_map(|&m| g.value(m).data().to_vec()).collect();
        let detection = self.detector.forward(g, &pyramid, &layout, Some(&scores))?;
        let sr = if with_sr {
            Some(self.sr.decode(g, &pyramid, x)?)
        } else {
            None
        };
        Ok(ModelOutput {
            pyramid,
            saliency: sal,
            detection,
            sr,
            layout,
        })
    }

    /// Centrality targets for every level of the layout.
    pub fn saliency_targets(&self, layout: &TokenLayout, boxes: &[GtBox]) -> Result<Vec<Array>> {
        layout
            .geoms
            .iter()
            .map(|geom| Ok(saliency::confidence_target(boxes, geom, self.config.saliency.sigma)?.c))
            .collect()
    }

    /// Component losses and the stage total. `hr` is required for stage 2.
    pub fn losses(
        &self,
        g: &mut Graph<'_>,
        out: &ModelOutput,
        boxes: &[GtBox],
        hr: Option<&Array>,
        weights: &LossWeights,
        stage: u8,
    ) -> Result<(Var, LossRecord)> {
        let DetLosses { cls, bbox, giou } = detection::set_losses(g, &out.detection, boxes, &self.config.detector)?;
        let targets = self.saliency_targets(&out.layout, boxes)?;
        let sc = &self.config.saliency;
        let sa = saliency::saliency_loss(g, &out.saliency.maps, &targets, sc.focal_alpha, sc.focal_gamma)?;
        let sr = match (out.sr, hr) {
            (Some(pred), Some(hr)) => {
                let t = g.constant(hr.clone());
                Some(sr::sr_loss(g, pred, t)?)
            }
            _ => None,
        };
        let terms = LossTerms { cls, bbox, giou, sa, sr };
        let total = detection::stage_loss(g, &terms, weights, stage)?;
        let rec = LossRecord {
            total: g.value(total).item(),
            cls: g.value(cls).item(),
            bbox: g.value(bbox).item(),
            giou: g.value(giou).item(),
            sa: g.value(sa).item(),
            sr: sr.map(|v| g.value(v).item()),
        };
        Ok((total, rec))
    }

    /// Detections (HR pixels) and the clamped SR image for one LR input.
    pub fn predict(
        &self,
        store: &ParamStore,
        lr: &Array,
        image_id: u64,
        max_dets: usize,
    ) -> Result<(Vec<Detection>, Array)> {
        let mut g = Graph::inference(store);
        let out = self.forward(&mut g, lr, true)?;
        let (h, w) = (lr.shape()[0] as f64, lr.shape()[1] as f64);
        let main = out.detection.main;
        let dets = detection::postprocess(
            g.value(main.logits),
            g.value(main.boxes),
            image_id,
            2.0 * w,
            2.0 * h,
            max_dets,
        );
        let img = sr::finalize(g.value(out.sr.expect("requested SR output")));
        Ok((dets, img))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::boxes::SizeBucket;

    #[test]
    fn forward_and_losses_are_finite() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SdcoNet::new(&mut store, &mut rng, &ModelConfig::tiny()).unwrap();
        let lr = Array::from_fn(&[32, 32, 3], |i| ((i * 31) % 97) as f64 / 97.0);
        let hr = Array::from_fn(&[64, 64, 3], |i| ((i * 17) % 89) as f64 / 89.0);
        let boxes = [GtBox {
            cx: 0.4,
            cy: 0.5,
            w: 0.2,
            h: 0.3,
            class_id: 1,
            size_bucket: SizeBucket::Small,
        }];
        let mut g = Graph::new(&store);
        let out = net.forward(&mut g, &lr, true).unwrap();
        assert_eq!(g.shape(out.sr.unwrap()), &[64, 64, 3]);
        let (total, rec) = net
            .losses(&mut g, &out, &boxes, Some(&hr), &LossWeights::default(), 2)
            .unwrap();
        assert!(rec.total.is_finite() && rec.sr.is_some());
        let w = LossWeights::default();
        let expect = w.cls * rec.cls + w.bbox * rec.bbox + w.giou * rec.giou + w.sa * rec.sa + w.sr * rec.sr.unwrap();
        assert!((rec.total - expect).abs() < 1e-9);
        let grads = g.backward(total);
        for group in ParamGroup::ALL {
            let any = store
                .group_ids(group)
                .iter()
                .any(|&id| grads.param(id).is_some_and(|v| v.iter().any(|x| *x != 0.0)));
            assert!(any, "{group:?} received no gradient");
        }
    }
}
