use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Declarative network description. Together with a seed it fully determines
/// the parameter tensors of a built model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stage_blocks: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub self_mask_stages: BTreeSet<usize>,
    pub fusion_tap_stages: [usize; 3],
    pub fusion_width: usize,
    pub attention_hidden: usize,
    pub num_attributes: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub enable_self_mask: bool,
    pub enable_fusion_multilevel: bool,
    pub enable_masked_attention: bool,
    pub enable_side_branch: bool,
}

impl ModelConfig {
    /// Desk-scale network: three stages of two bottleneck blocks.
    pub fn toy(num_attributes: usize) -> Self {
        ModelConfig {
            stage_blocks: vec![2, 2, 2],
            stage_widths: vec![16, 32, 64],
            stem_width: 16,
            stem_kernel: 3,
            self_mask_stages: [1].into_iter().collect(),
            fusion_tap_stages: [0, 1, 2],
            fusion_width: 32,
            attention_hidden: 32,
            num_attributes,
            input_h: 64,
            input_w: 64,
            enable_self_mask: true,
            enable_fusion_multilevel: true,
            enable_masked_attention: true,
            enable_side_branch: true,
        }
    }

    /// ResNet-101 stage pattern at 224×224, used for parameter-count
    /// calibration only.
    pub fn full_scale(num_attributes: usize) -> Self {
        ModelConfig {
            stage_blocks: vec![3, 4, 23, 3],
            stage_widths: vec![256, 512, 1024, 2048],
            stem_width: 64,
            stem_kernel: 7,
            self_mask_stages: [1, 2, 3].into_iter().collect(),
            fusion_tap_stages: [1, 2, 3],
            fusion_width: 256,
            attention_hidden: 256,
            num_attributes,
            input_h: 224,
            input_w: 224,
            enable_self_mask: true,
            enable_fusion_multilevel: true,
            enable_masked_attention: true,
            enable_side_branch: true,
        }
    }

    /// All three distraction-aware blocks switched off.
    pub fn baseline(mut self) -> Self {
        self.enable_self_mask = false;
        self.enable_fusion_multilevel = false;
        self.enable_masked_attention = false;
        self
    }

    pub fn with_switches(mut self, multilevel: bool, self_mask: bool, masked_attention: bool) -> Self {
        self.enable_fusion_multilevel = multilevel;
        self.enable_self_mask = self_mask;
        self.enable_masked_attention = masked_attention;
        self
    }

    pub fn num_stages(&self) -> usize {
        self.stage_blocks.len()
    }

    /// Spatial extent after stage `s`: the stem halves the input, every stage
    /// after the first halves again (ceil, matching the 3×3 stride-2 conv).
    pub fn stage_extent(&self, s: usize) -> (usize, usize) {
        let half = |v: usize| v.div_ceil(2);
        let (mut h, mut w) = (half(self.input_h), half(self.input_w));
        for _ in 0..s {
            h = half(h);
            w = half(w);
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.stage_blocks.is_empty() {
            return bad("stage_blocks", "at least one stage required".into());
        }
        if self.stage_blocks.len() != self.stage_widths.len() {
            return bad(
                "stage_widths",
                format!(
                    "{} widths for {} stages",
                    self.stage_widths.len(),
                    self.stage_blocks.len()
                ),
            );
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return bad("stage_blocks", "every stage needs at least one block".into());
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return bad("stage_widths", "widths must be positive".into());
        }
        for (field, v) in [
            ("stem_width", self.stem_width),
            ("stem_kernel", self.stem_kernel),
            ("fusion_width", self.fusion_width),
            ("attention_hidden", self.attention_hidden),
            ("num_attributes", self.num_attributes),
            ("input_h", self.input_h),
            ("input_w", self.input_w),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if self.stem_kernel % 2 == 0 {
            return bad("stem_kernel", "must be odd".into());
        }
        let n = self.num_stages();
        if let Some(&s) = self.self_mask_stages.iter().find(|&&s| s >= n) {
            return bad("self_mask_stages", format!("stage {s} does not exist ({n} stages)"));
        }
        let t = self.fusion_tap_stages;
        if !(t[0] < t[1] && t[1] < t[2]) {
            return bad("fusion_tap_stages", format!("{t:?} must be strictly ascending"));
        }
        if t[2] >= n {
            return bad("fusion_tap_stages", format!("stage {} does not exist ({n} stages)", t[2]));
        }
        let (h, w) = self.stage_extent(n - 1);
        if h == 0 || w == 0 || self.input_h < 2 || self.input_w < 2 {
            return bad("input_h", "input too small for the stage count".into());
        }
        Ok(())
    }

    /// Canonical `key=value` text, one key per line in fixed order.
    pub fn to_text(&self) -> String {
        let list = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "stage_blocks={}", list(&mut self.stage_blocks.iter().copied()));
        let _ = writeln!(s, "stage_widths={}", list(&mut self.stage_widths.iter().copied()));
        let _ = writeln!(s, "stem_width={}", self.stem_width);
        let _ = writeln!(s, "stem_kernel={}", self.stem_kernel);
        let _ = writeln!(s, "self_mask_stages={}", list(&mut self.self_mask_stages.iter().copied()));
        let _ = writeln!(s, "fusion_tap_stages={}", list(&mut self.fusion_tap_stages.iter().copied()));
        let _ = writeln!(s, "fusion_width={}", self.fusion_width);
        let _ = writeln!(s, "attention_hidden={}", self.attention_hidden);
        let _ = writeln!(s, "num_attributes={}", self.num_attributes);
        let _ = writeln!(s, "input_h={}", self.input_h);
        let _ = writeln!(s, "input_w={}", self.input_w);
        let _ = writeln!(s, "enable_self_mask={}", self.enable_self_mask);
        let _ = writeln!(s, "enable_fusion_multilevel={}", self.enable_fusion_multilevel);
        let _ = writeln!(s, "enable_masked_attention={}", self.enable_masked_attention);
        let _ = writeln!(s, "enable_side_branch={}", self.enable_side_branch);
        s
    }

    /// Applies one `key=value` pair; returns `Ok(false)` for keys that are
    /// not model keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let err = |why: &str| Error::Config(format!("{key}={value}: {why}"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| err("expected an integer"));
        let list = |v: &str| -> Result<Vec<usize>> {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(num).collect()
        };
        let flag = |v: &str| match v.trim() {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(err("expected true or false")),
        };
        match key {
            "stage_blocks" => self.stage_blocks = list(value)?,
            "stage_widths" => self.stage_widths = list(value)?,
            "stem_width" => self.stem_width = num(value)?,
            "stem_kernel" => self.stem_kernel = num(value)?,
            "self_mask_stages" => self.self_mask_stages = list(value)?.into_iter().collect(),
            "fusion_tap_stages" => {
                self.fusion_tap_stages = list(value)?
                    .try_into()
                    .map_err(|_| err("exactly three stage indices required"))?
            }
            "fusion_width" => self.fusion_width = num(value)?,
            "attention_hidden" => self.attention_hidden = num(value)?,
            "num_attributes" => self.num_attributes = num(value)?,
            "input_h" => self.input_h = num(value)?,
            "input_w" => self.input_w = num(value)?,
            "enable_self_mask" => self.enable_self_mask = flag(value)?,
            "enable_fusion_multilevel" => self.enable_fusion_multilevel = flag(value)?,
            "enable_masked_attention" => self.enable_masked_attention = flag(value)?,
            "enable_side_branch" => self.enable_side_branch = flag(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::toy(1);
        for (key, value) in parse_key_values(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown model key {key}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits flat `key=value` text; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {l:?}", i + 1)))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}
