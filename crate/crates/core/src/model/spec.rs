use crate::error::{Error, Result};

/// Number of discriminative learning-rate groups.
pub const NUM_GROUPS: usize = 4;

/// The eight tissue classes of the colorectal histology texture dataset.
pub const CRC_CLASS_NAMES: [&str; 8] = [
    "tumour_epithelium",
    "simple_stroma",
    "complex_stroma",
    "immune_cells",
    "debris",
    "mucosal_glands",
    "adipose_tissue",
    "background",
];

/// Filter counts of one Fire module.
///
/// Either expand branch may be empty, but not both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FireSpec {
    pub squeeze: usize,
    pub expand1x1: usize,
    pub expand3x3: usize,
}

impl FireSpec {
    pub fn new(squeeze: usize, expand1x1: usize, expand3x3: usize) -> Result<Self> {
        if squeeze == 0 || expand1x1 + expand3x3 == 0 || squeeze > expand1x1 + expand3x3 {
            return Err(Error::invalid(format!(
                "invalid fire spec ({squeeze}, {expand1x1}, {expand3x3})"
            )));
        }
        Ok(Self {
            squeeze,
            expand1x1,
            expand3x3,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.expand1x1 + self.expand3x3
    }

    /// Weights plus biases of the three convolutions for a given input width.
    pub fn parameter_count(&self, in_channels: usize) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| if cout == 0 { 0 } else { cin * cout * k * k + cout };
        conv(in_channels, self.squeeze, 1)
            + conv(self.squeeze, self.expand1x1, 1)
            + conv(self.squeeze, self.expand3x3, 3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        group: u8,
    },
    MaxPool {
        name: String,
        kernel: usize,
        stride: usize,
        group: u8,
    },
    Fire {
        name: String,
        spec: FireSpec,
        group: u8,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::MaxPool { name, .. } | LayerSpec::Fire { name, .. } => name,
        }
    }

    pub fn group(&self) -> u8 {
        match self {
            LayerSpec::Conv { group, .. } | LayerSpec::MaxPool { group, .. } | LayerSpec::Fire { group, .. } => *group,
        }
    }
}

/// Head: `[avg ‖ max] pool → BN → dropout → linear → ReLU → BN → dropout → linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub hidden: usize,
    pub dropout1: f32,
    pub dropout2: f32,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            hidden: 512,
            dropout1: 0.25,
            dropout2: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Square input side; 224 for the standard network.
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl NetworkSpec {
    /// SqueezeNet v1.0 backbone with the eight-class head.
    pub fn standard() -> Self {
        let conv = |name: &str, out_channels, kernel, stride, group| LayerSpec::Conv {
            name: name.into(),
            out_channels,
            kernel,
            stride,
            group,
        };
        let pool = |name: &str, group| LayerSpec::MaxPool {
            name: name.into(),
            kernel: 3,
            stride: 2,
            group,
        };
        let fire = |name: &str, s, e1, e3, group| LayerSpec::Fire {
            name: name.into(),
            spec: FireSpec::new(s, e1, e3).expect("valid fire entry"),
            group,
        };
        Self {
            input_size: 224,
            in_channels: 3,
            num_classes: CRC_CLASS_NAMES.len(),
            layers: vec![
                conv("conv1", 96, 7, 2, 1),
                pool("maxpool1", 1),
                fire("fire1", 16, 64, 64, 1),
                fire("fire2", 16, 64, 64, 2),
                fire("fire3", 32, 128, 128, 2),
                pool("maxpool2", 2),
                fire("fire4", 32, 128, 128, 2),
                fire("fire5", 48, 192, 192, 3),
                fire("fire6", 48, 192, 192, 3),
                fire("fire7", 64, 256, 256, 3),
                pool("maxpool3", 3),
                fire("fire8", 64, 256, 256, 4),
            ],
            head: HeadSpec::default(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_num_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    /// Channels leaving the backbone.
    pub fn feature_channels(&self) -> usize {
        let mut c = self.in_channels;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { out_channels, .. } => c = *out_channels,
                LayerSpec::Fire { spec, .. } => c = spec.out_channels(),
                LayerSpec::MaxPool { .. } => {}
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        for p in [self.head.dropout1, self.head.dropout2] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        if self.layers.iter().any(|l| !(1..=4).contains(&l.group())) {
            return Err(Error::invalid("layer groups must be in 1..=4"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fire_parameter_counts() {
        let fire1 = FireSpec::new(16, 64, 64).unwrap();
        assert_eq!(fire1.parameter_count(96), 11_920);
        assert_eq!(fire1.out_channels(), 128);
        let degenerate = FireSpec::new(1, 1, 0).unwrap();
        assert_eq!(degenerate.parameter_count(4), 4 + 1 + 1 + 1);
        assert!(FireSpec::new(0, 4, 4).is_err());
        assert!(FireSpec::new(9, 4, 4).is_err());
    }

    #[test]
    fn backbone_ends_with_512_channels() {
        assert_eq!(NetworkSpec::standard().feature_channels(), 512);
    }
}
