//! The five ablation variants: optional spatial transformer in front, optional CBAM
//! after the stem, a three-block strided backbone and the detection head.

use serde::{Deserialize, Serialize};

use crate::cbam::{CbamConfig, CbamParams};
use crate::detect::{decode, loss_var, nms, DetectConfig, Detection, DetectionHead, GroundTruthBox, HeadOutput, LossBreakdown};
use crate::numeric::{Bound, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::stn::{SpatialTransformer, StnConfig, StnMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Yolo,
    Stn,
    StnTps,
    CbamStn,
    CbamStnTps,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Yolo, Variant::Stn, Variant::StnTps, Variant::CbamStn, Variant::CbamStnTps];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Yolo => "yolo",
            Variant::Stn => "stn",
            Variant::StnTps => "stn_tps",
            Variant::CbamStn => "cbam_stn",
            Variant::CbamStnTps => "cbam_stn_tps",
        }
    }

    pub fn stn_mode(self) -> Option<StnMode> {
        match self {
            Variant::Yolo => None,
            Variant::Stn | Variant::CbamStn => Some(StnMode::Affine),
            Variant::StnTps | Variant::CbamStnTps => Some(StnMode::Tps),
        }
    }

    pub fn has_cbam(self) -> bool {
        matches!(self, Variant::CbamStn | Variant::CbamStnTps)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    /// Output channels of the three backbone blocks.
    pub block_channels: [usize; 3],
    /// Average-pool factor applied before the localization net.
    pub loc_downsample: usize,
    /// `mode` is overridden by the variant.
    pub stn: StnConfig,
    pub cbam: CbamConfig,
    pub detect: DetectConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: 8,
            block_channels: [16, 32, 32],
            loc_downsample: 2,
            stn: StnConfig::default(),
            cbam: CbamConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 8 and at least 16, got {}",
                self.image_size
            )));
        }
        if self.stem_channels == 0 || self.block_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.loc_downsample == 0 {
            return Err(Error::Config("loc_downsample must be at least 1".into()));
        }
        self.stn.validate()?;
        self.detect.validate()
    }

    /// Side of the detection grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / 8
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

impl ConvLayer {
    /// Stride 1 uses a 3×3 kernel, stride 2 a 4×4 kernel so that pad 1 halves the map exactly.
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, init: &mut Init) -> Self {
        let k = if stride == 2 { 4 } else { 3 };
        Self {
            weight: store.add(format!("{name}.weight"), init.he(&[cout, cin, k, k], cin * k * k)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, 1)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    variant: Variant,
    cfg: ModelConfig,
    store: ParamStore,
    stn: Option<SpatialTransformer>,
    stem: ConvLayer,
    cbam: Option<CbamParams>,
    blocks: [ConvLayer; 3],
    head: DetectionHead,
}

/// Post-NMS candidate list used for mAP; the operating point filters these further.
pub const NMS_IOU: f64 = 0.5;
pub const CANDIDATE_SCORE: f64 = 0.001;

impl Model {
    pub fn new(variant: Variant, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let n = cfg.image_size;
        let stn = match variant.stn_mode() {
            Some(mode) => {
                let stn_cfg = StnConfig { mode, ..cfg.stn.clone() };
                Some(SpatialTransformer::new(&mut store, "stn", 3, n, n, stn_cfg, cfg.loc_downsample, &mut init)?)
            }
            None => None,
        };
        let c0 = cfg.stem_channels;
        let stem = ConvLayer::new(&mut store, "stem", 3, c0, 2, &mut init);
        let cbam = if variant.has_cbam() {
            Some(CbamParams::new(&mut store, "cbam", c0, &cfg.cbam, &mut init)?)
        } else {
            None
        };
        let [c1, c2, c3] = cfg.block_channels;
        let blocks = [
            ConvLayer::new(&mut store, "block1", c0, c1, 2, &mut init),
            ConvLayer::new(&mut store, "block2", c1, c2, 2, &mut init),
            ConvLayer::new(&mut store, "block3", c2, c3, 1, &mut init),
        ];
        let head = DetectionHead::new(&mut store, "head", c3, cfg.detect.clone(), &mut init)?;
        Ok(Self {
            variant,
            cfg: cfg.clone(),
            store,
            stn,
            stem,
            cbam,
            blocks,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn detect_config(&self) -> &DetectConfig {
        self.head.config()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stn(&self) -> Option<&SpatialTransformer> {
        self.stn.as_ref()
    }

    pub fn cbam(&self) -> Option<&CbamParams> {
        self.cbam.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Scalar parameter counts per component, in forward order.
    pub fn param_breakdown(&self) -> Vec<(&'static str, usize)> {
        ["stn", "stem", "cbam", "block1", "block2", "block3", "head"]
            .into_iter()
            .map(|c| (c, self.store.count_prefix(&format!("{c}."))))
            .filter(|(_, n)| *n > 0)
            .collect()
    }

    /// Stage names in the order `forward_var` applies them.
    pub fn stages(&self) -> Vec<&'static str> {
        let mut s = Vec::new();
        if let Some(stn) = &self.stn {
            s.push("localize");
            s.push(match stn.config().mode {
                StnMode::Affine => "affine_warp",
                StnMode::Tps => "tps_warp",
            });
        }
        s.push("stem");
        if self.cbam.is_some() {
            s.push("channel_attention");
            s.push("spatial_attention");
        }
        s.extend(["block1", "block2", "block3", "head"]);
        s
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let n = self.cfg.image_size;
        if shape != [3, n, n] {
            return Err(Error::Config(format!("model expects a [3, {n}, {n}] image, got {shape:?}")));
        }
        Ok(())
    }

    /// STN output, or the input when the variant has no transformer.
    pub fn transform_var(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        self.check_image(g.shape(image))?;
        match &self.stn {
            Some(stn) => stn.forward_var(g, p, image),
            None => Ok(image),
        }
    }

    /// `(cls_logits, box_raw)` on the detection grid.
    pub fn forward_var(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<(Var, Var)> {
        let mut x = self.transform_var(g, p, image)?;
        x = self.stem.forward(g, p, x)?;
        if let Some(cbam) = &self.cbam {
            x = cbam.forward_var(g, p, x)?;
        }
        for b in &self.blocks {
            x = b.forward(g, p, x)?;
        }
        self.head.forward_var(g, p, x)
    }

    /// The image as seen by the backbone.
    pub fn transform(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(image.clone());
        let y = self.transform_var(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(image.clone());
        let (c, b) = self.forward_var(&mut g, &p, x)?;
        Ok(HeadOutput {
            cls_logits: g.value(c).clone(),
            box_raw: g.value(b).clone(),
        })
    }

    /// Post-NMS candidates down to [`CANDIDATE_SCORE`].
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let out = self.predict(image)?;
        Ok(nms(&decode(&out, self.head.config()), NMS_IOU, CANDIDATE_SCORE))
    }

    /// Loss on one image and its gradient for every parameter, in store order.
    pub fn loss_and_grad(&self, image: &Tensor, gts: &[GroundTruthBox]) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(image.clone());
        let (c, b) = self.forward_var(&mut g, &p, x)?;
        let (loss, parts) = loss_var(&mut g, c, b, gts, self.head.config())?;
        let grads = g.backward(loss)?;
        let per_param = self
            .store
            .ids()
            .zip(p.vars())
            .map(|(id, &v)| grads.get_or_zeros(v, self.store.get(id).len()))
            .collect();
        Ok((parts, per_param))
    }

    pub fn loss(&self, image: &Tensor, gts: &[GroundTruthBox]) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(image.clone());
        let (c, b) = self.forward_var(&mut g, &p, x)?;
        Ok(loss_var(&mut g, c, b, gts, self.head.config())?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gradcheck_with, GradCheckOptions};

    fn image(seed: u64) -> Tensor {
        let mut init = Init::new(seed);
        init.uniform(&[3, 64, 64], 0.0, 1.0)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("yolov8".parse::<Variant>().is_err());
    }

    #[test]
    fn yolo_has_no_stn_or_cbam_parameters() {
        let m = Model::new(Variant::Yolo, &ModelConfig::default(), 0).unwrap();
        assert_eq!(m.store().count_prefix("stn."), 0);
        assert_eq!(m.store().count_prefix("cbam."), 0);
        let full = Model::new(Variant::CbamStnTps, &ModelConfig::default(), 0).unwrap();
        assert!(full.store().count_prefix("stn.") > 0);
        assert!(full.store().count_prefix("cbam.") > 0);
        let total: usize = full.param_breakdown().iter().map(|(_, n)| n).sum();
        assert_eq!(total, full.param_count());
    }

    #[test]
    fn full_variant_stage_order() {
        let m = Model::new(Variant::CbamStnTps, &ModelConfig::default(), 0).unwrap();
        assert_eq!(
            m.stages(),
            [
                "localize",
                "tps_warp",
                "stem",
                "channel_attention",
                "spatial_attention",
                "block1",
                "block2",
                "block3",
                "head"
            ]
        );
        let m = Model::new(Variant::Stn, &ModelConfig::default(), 0).unwrap();
        assert_eq!(m.stages()[..2], ["localize", "affine_warp"]);
    }

    #[test]
    fn all_variants_share_output_shapes() {
        let img = image(3);
        for v in Variant::ALL {
            let m = Model::new(v, &ModelConfig::default(), 1).unwrap();
            let out = m.predict(&img).unwrap();
            assert_eq!(out.cls_logits.shape(), &[3, 8, 8], "{v}");
            assert_eq!(out.box_raw.shape(), &[4, 8, 8], "{v}");
        }
    }

    #[test]
    fn fresh_transformer_is_identity() {
        let img = image(5);
        for v in Variant::ALL.into_iter().filter(|v| v.stn_mode().is_some()) {
            let m = Model::new(v, &ModelConfig::default(), 2).unwrap();
            assert_eq!(m.transform(&img).unwrap(), img, "{v}");
        }
    }

    #[test]
    fn rejects_wrong_image_size() {
        let m = Model::new(Variant::Yolo, &ModelConfig::default(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[3, 32, 32])).is_err());
    }

    #[test]
    fn composed_model_gradcheck() {
        let cfg = ModelConfig {
            image_size: 16,
            loc_downsample: 1,
            ..ModelConfig::default()
        };
        let gts = [GroundTruthBox::new([0.4, 0.6, 0.3, 0.2], 1).unwrap()];
        let mut init = Init::new(11);
        let img = init.uniform(&[3, 16, 16], 0.0, 1.0);
        let mut m = Model::new(Variant::CbamStnTps, &cfg, 4).unwrap();
        // a nonzero STN head so the warp is exercised
        let (hw, _) = m.stn().unwrap().net().head();
        let t = init.uniform(m.store().get(hw).shape(), -0.3, 0.3);
        *m.store_mut().get_mut(hw) = t;
        let ids: Vec<ParamId> = m.store().ids().collect();
        let inputs: Vec<Tensor> = ids.iter().map(|&id| m.store().get(id).clone()).collect();
        let opts = GradCheckOptions { max_coords_per_input: Some(6), ..GradCheckOptions::default() };
        let report = gradcheck_with(
            "model",
            |g, vars| {
                let mut p = m.store().bind(g);
                for (&id, &v) in ids.iter().zip(vars) {
                    p.replace(id, v);
                }
                let x = g.constant(img.clone());
                let (c, b) = m.forward_var(g, &p, x)?;
                Ok::<_, Error>(loss_var(g, c, b, &gts, m.detect_config())?.0)
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert!(report.pass && !report.inconclusive, "{report} {:?}", report.per_input_errors);
    }
}
