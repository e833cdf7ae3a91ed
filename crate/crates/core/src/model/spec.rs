use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::ModelError;
use crate::config::KeyValues;
use crate::dcls::{DclsConfig, DclsVersion, DEFAULT_SIGMA_MIN};
use crate::tensor::ConvGeometry;

/// How a block's depthwise spatial convolution is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMethod {
    /// Ordinary K×K depthwise convolution with padding `(K−1)/2`.
    Depthwise { kernel: usize },
    /// DCLS with an S×S dilated kernel and `count` elements per channel.
    Dcls { size: usize, count: usize, version: DclsVersion },
}

impl ConvMethod {
    pub const DSC7: ConvMethod = ConvMethod::Depthwise { kernel: 7 };

    /// DCLS-Gauss with a 23×23 dilated kernel and 26 elements.
    pub fn dcls_gauss() -> Self {
        ConvMethod::Dcls { size: 23, count: 26, version: DclsVersion::Gauss }
    }
}

impl fmt::Display for ConvMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvMethod::Depthwise { kernel: 7 } => write!(f, "dsc7"),
            ConvMethod::Depthwise { kernel } => write!(f, "dw{kernel}"),
            ConvMethod::Dcls { size, count, version } => write!(f, "dcls:{size}:{count}:{version}"),
        }
    }
}

impl FromStr for ConvMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "dsc7" {
            return Ok(ConvMethod::DSC7);
        }
        if s == "dcls" || s == "dcls-gauss" {
            return Ok(ConvMethod::dcls_gauss());
        }
        if let Some(k) = s.strip_prefix("dw") {
            let kernel = k.parse().map_err(|_| format!("bad depthwise kernel in '{s}'"))?;
            return Ok(ConvMethod::Depthwise { kernel });
        }
        if let Some(rest) = s.strip_prefix("dcls:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if let [size, count, version] = parts[..] {
                return Ok(ConvMethod::Dcls {
                    size: size.parse().map_err(|_| format!("bad dilated size in '{s}'"))?,
                    count: count.parse().map_err(|_| format!("bad kernel count in '{s}'"))?,
                    version: version.parse()?,
                });
            }
        }
        Err(format!("unknown conv method '{s}' (expected dsc7, dwK or dcls:S:M:gauss|bilinear)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSpec {
    pub depth: usize,
    pub channels: usize,
    pub conv_method: ConvMethod,
}

/// Declarative architecture: audio stem, ConvNeXt stages, linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub stem: ConvGeometry,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub drop_path_rate: f64,
    pub layer_scale_init: f64,
    pub mlp_ratio: usize,
    pub sigma_min: f64,
    pub norm_eps: f64,
}

const SPEC_KEYS: &[&str] = &[
    "in_channels",
    "stem_kernel",
    "stem_stride",
    "stem_padding",
    "stem_channels",
    "depths",
    "channels",
    "conv_methods",
    "num_classes",
    "drop_path_rate",
    "layer_scale_init",
    "mlp_ratio",
    "sigma_min",
    "norm_eps",
];

fn parse_pair(key: &str, v: &str) -> Result<(usize, usize), ModelError> {
    let bad = || ModelError::InvalidSpec(format!("{key}: expected HxW, got '{v}'"));
    let (a, b) = v.split_once('x').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

impl ModelSpec {
    /// ConvNeXt-T on 1×128×T log-mel input: depths 3,3,9,3, widths
    /// 96..768, (2,16)/(2,16) stem, 527 classes.
    pub fn convnext_tiny_audio() -> Self {
        Self::convnext(&[3, 3, 9, 3], &[96, 192, 384, 768], 527)
    }

    /// Two-stage model used for desk-scale training runs.
    pub fn mini(num_classes: usize) -> Self {
        let mut spec = Self::convnext(&[1, 1], &[16, 32], num_classes);
        spec.drop_path_rate = 0.0;
        spec
    }

    pub fn convnext(depths: &[usize], channels: &[usize], num_classes: usize) -> Self {
        Self {
            in_channels: 1,
            stem: ConvGeometry::new((2, 16), (2, 16), (0, 0)),
            stem_channels: channels.first().copied().unwrap_or(0),
            stages: depths
                .iter()
                .zip(channels)
                .map(|(&depth, &channels)| StageSpec { depth, channels, conv_method: ConvMethod::DSC7 })
                .collect(),
            num_classes,
            drop_path_rate: 0.4,
            layer_scale_init: 1e-6,
            mlp_ratio: 4,
            sigma_min: DEFAULT_SIGMA_MIN,
            norm_eps: 1e-6,
        }
    }

    pub fn preset(name: &str, num_classes: Option<usize>) -> Result<Self, ModelError> {
        match name {
            "convnext-t" | "convnext-tiny" => {
                let mut s = Self::convnext_tiny_audio();
                if let Some(n) = num_classes {
                    s.num_classes = n;
                }
                Ok(s)
            }
            "mini" => Ok(Self::mini(num_classes.unwrap_or(8))),
            other => Err(ModelError::InvalidSpec(format!("unknown preset '{other}' (expected convnext-t or mini)"))),
        }
    }

    pub fn with_conv_method(mut self, method: ConvMethod) -> Self {
        self.stages.iter_mut().for_each(|s| s.conv_method = method);
        self
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn dcls_config(&self, method: ConvMethod, channels: usize) -> Option<DclsConfig> {
        match method {
            ConvMethod::Dcls { size, count, version } => Some(DclsConfig {
                channels,
                kernel_count: count,
                dilated_size: size,
                version,
                sigma_min: self.sigma_min,
            }),
            ConvMethod::Depthwise { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, num_classes and mlp_ratio must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("at least one stage required".into());
        }
        if self.stem_channels != self.stages[0].channels {
            return bad(format!(
                "stem_channels {} must equal first stage channels {}",
                self.stem_channels, self.stages[0].channels
            ));
        }
        self.stem
            .output_extent(self.stem.kernel_h, self.stem.kernel_w)
            .map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
        for (i, pair) in self.stages.windows(2).enumerate() {
            if pair[1].channels <= pair[0].channels {
                return bad(format!(
                    "stage channel counts must be strictly increasing (stage {} has {}, stage {} has {})",
                    i,
                    pair[0].channels,
                    i + 1,
                    pair[1].channels
                ));
            }
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.depth == 0 || st.channels == 0 {
                return bad(format!("stage {i}: depth and channels must be positive"));
            }
            match st.conv_method {
                ConvMethod::Depthwise { kernel } if kernel % 2 == 0 || kernel == 0 => {
                    return bad(format!("stage {i}: depthwise kernel must be odd, got {kernel}"))
                }
                m @ ConvMethod::Dcls { .. } => {
                    self.dcls_config(m, st.channels).unwrap().validate()?;
                }
                _ => {}
            }
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate must be in [0, 1), got {}", self.drop_path_rate));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let join = |f: &dyn Fn(&StageSpec) -> String| self.stages.iter().map(f).collect::<Vec<_>>().join(",");
        let mut kv = KeyValues::default();
        kv.push("in_channels", self.in_channels);
        kv.push("stem_kernel", format!("{}x{}", self.stem.kernel_h, self.stem.kernel_w));
        kv.push("stem_stride", format!("{}x{}", self.stem.stride_h, self.stem.stride_w));
        kv.push("stem_padding", format!("{}x{}", self.stem.pad_h, self.stem.pad_w));
        kv.push("stem_channels", self.stem_channels);
        kv.push("depths", join(&|s| s.depth.to_string()));
        kv.push("channels", join(&|s| s.channels.to_string()));
        kv.push("conv_methods", join(&|s| s.conv_method.to_string()));
        kv.push("num_classes", self.num_classes);
        kv.push("drop_path_rate", self.drop_path_rate);
        kv.push("layer_scale_init", self.layer_scale_init);
        kv.push("mlp_ratio", self.mlp_ratio);
        kv.push("sigma_min", self.sigma_min);
        kv.push("norm_eps", self.norm_eps);
        kv
    }

    /// Missing keys fall back to the ConvNeXt-T audio defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ModelError> {
        kv.reject_unknown(SPEC_KEYS)?;
        let mut spec = Self::convnext_tiny_audio();
        if let Some(v) = kv.get("in_channels")? {
            spec.in_channels = v;
        }
        let kernel = kv.raw("stem_kernel").map(|v| parse_pair("stem_kernel", v)).transpose()?;
        let stride = kv.raw("stem_stride").map(|v| parse_pair("stem_stride", v)).transpose()?;
        let pad = kv.raw("stem_padding").map(|v| parse_pair("stem_padding", v)).transpose()?;
        spec.stem = ConvGeometry::new(
            kernel.unwrap_or((spec.stem.kernel_h, spec.stem.kernel_w)),
            stride.unwrap_or((spec.stem.stride_h, spec.stem.stride_w)),
            pad.unwrap_or((spec.stem.pad_h, spec.stem.pad_w)),
        );
        let depths: Vec<usize> = kv.get_list("depths")?.unwrap_or_else(|| spec.stages.iter().map(|s| s.depth).collect());
        let channels: Vec<usize> =
            kv.get_list("channels")?.unwrap_or_else(|| spec.stages.iter().map(|s| s.channels).collect());
        if depths.len() != channels.len() {
            return Err(ModelError::InvalidSpec("depths and channels must have the same length".into()));
        }
        let methods: Vec<ConvMethod> = match kv.get_list::<ConvMethod>("conv_methods")? {
            Some(m) if m.len() == 1 => vec![m[0]; depths.len()],
            Some(m) if m.len() == depths.len() => m,
            Some(_) => return Err(ModelError::InvalidSpec("conv_methods must list one method or one per stage".into())),
            None => vec![ConvMethod::DSC7; depths.len()],
        };
        spec.stages = depths
            .iter()
            .zip(&channels)
            .zip(&methods)
            .map(|((&depth, &channels), &conv_method)| StageSpec { depth, channels, conv_method })
            .collect();
        spec.stem_channels = kv.get("stem_channels")?.unwrap_or(channels.first().copied().unwrap_or(0));
        if let Some(v) = kv.get("num_classes")? {
            spec.num_classes = v;
        }
        if let Some(v) = kv.get("drop_path_rate")? {
            spec.drop_path_rate = v;
        }
        if let Some(v) = kv.get("layer_scale_init")? {
            spec.layer_scale_init = v;
        }
        if let Some(v) = kv.get("mlp_ratio")? {
            spec.mlp_ratio = v;
        }
        if let Some(v) = kv.get("sigma_min")? {
            spec.sigma_min = v;
        }
        if let Some(v) = kv.get("norm_eps")? {
            spec.norm_eps = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        self.to_key_values().render(" = ")
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        Self::from_key_values(&KeyValues::parse(text, '=')?)
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut spec = ModelSpec::convnext_tiny_audio();
        spec.stages[2].conv_method = ConvMethod::dcls_gauss();
        spec.stages[3].conv_method = ConvMethod::Depthwise { kernel: 3 };
        let back = ModelSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
    }

    #[test]
    fn method_names() {
        for m in ["dsc7", "dw3", "dcls:23:26:gauss", "dcls:17:34:bilinear"] {
            assert_eq!(m.parse::<ConvMethod>().unwrap().to_string(), m);
        }
        assert!("dcls:23:gauss".parse::<ConvMethod>().is_err());
    }

    #[test]
    fn rejects_non_increasing_channels() {
        let spec = ModelSpec::convnext(&[1, 1], &[16, 16], 4);
        assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec(_))));
    }

    #[test]
    fn rejects_even_dcls_size() {
        let spec = ModelSpec::mini(4).with_conv_method(ConvMethod::Dcls { size: 22, count: 26, version: DclsVersion::Gauss });
        assert!(matches!(spec.validate(), Err(ModelError::Dcls(_))));
    }
}
