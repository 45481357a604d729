use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ArchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    Basic,
    Bottleneck,
}

impl BlockType {
    /// Weighted layers per residual block.
    pub fn layers(self) -> usize {
        match self {
            BlockType::Basic => 2,
            BlockType::Bottleneck => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShortcutPolicy {
    /// Projection on every dimension-changing shortcut.
    #[serde(rename = "all-B")]
    AllB,
    /// Zero-padding on dimension-changing final-level shortcuts, projection elsewhere.
    #[serde(rename = "A+B")]
    AB,
}

impl fmt::Display for ShortcutPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShortcutPolicy::AllB => "all-B",
            ShortcutPolicy::AB => "A+B",
        })
    }
}

impl FromStr for ShortcutPolicy {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-B" | "B" => Ok(ShortcutPolicy::AllB),
            "A+B" => Ok(ShortcutPolicy::AB),
            other => Err(ArchError::field("policy", format!("unknown shortcut policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationOrder {
    /// BN-ReLU-conv inside the branch, nothing after the junction.
    Pre,
    /// conv-BN-ReLU inside the branch, ReLU after the junction.
    Post,
}

pub const DEFAULT_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Smallest spatial extent accepted: three stride-2 stages need at least 8.
pub const MIN_SPATIAL: usize = 8;

/// Declarative description of a RoR network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub block_type: BlockType,
    /// Residual blocks per group, `L1..L4`.
    pub groups: [usize; 4],
    /// Shortcut level count `m`.
    #[serde(rename = "m")]
    pub levels: usize,
    /// Bottleneck output width factor `k`.
    #[serde(rename = "k", default = "default_k")]
    pub width_factor: usize,
    #[serde(default = "default_widths")]
    pub widths: [usize; 4],
    pub policy: ShortcutPolicy,
    #[serde(default = "default_order")]
    pub order: ActivationOrder,
    pub classes: usize,
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    /// Depth the spec is labelled with, if any; checked against the computed depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

fn default_k() -> usize {
    4
}

fn default_widths() -> [usize; 4] {
    DEFAULT_WIDTHS
}

fn default_order() -> ActivationOrder {
    ActivationOrder::Pre
}

impl ArchSpec {
    pub fn basic(groups: [usize; 4], classes: usize, input: [usize; 3]) -> Self {
        Self {
            block_type: BlockType::Basic,
            groups,
            levels: 3,
            width_factor: 1,
            widths: DEFAULT_WIDTHS,
            policy: ShortcutPolicy::AB,
            order: ActivationOrder::Pre,
            classes,
            input,
            depth: None,
        }
    }

    pub fn bottleneck(groups: [usize; 4], k: usize, classes: usize, input: [usize; 3]) -> Self {
        Self {
            block_type: BlockType::Bottleneck,
            width_factor: k,
            ..Self::basic(groups, classes, input)
        }
    }

    pub fn with_widths(mut self, widths: [usize; 4]) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_policy(mut self, policy: ShortcutPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_levels(mut self, m: usize) -> Self {
        self.levels = m;
        self
    }

    pub fn with_order(mut self, order: ActivationOrder) -> Self {
        self.order = order;
        self
    }

    pub fn parse(text: &str) -> Result<Self, ArchError> {
        let spec: ArchSpec = toml::from_str(text).map_err(|e| ArchError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("arch spec serializes")
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.groups.contains(&0) {
            return Err(ArchError::field("groups", "every group needs at least one block"));
        }
        if !(2..=3).contains(&self.levels) {
            return Err(ArchError::field("m", format!("level count {} unsupported (2 or 3)", self.levels)));
        }
        if self.block_type == BlockType::Bottleneck && ![1, 2, 4].contains(&self.width_factor) {
            return Err(ArchError::field("k", format!("width factor {} not in {{1, 2, 4}}", self.width_factor)));
        }
        if self.widths.contains(&0) {
            return Err(ArchError::field("widths", "widths must be positive"));
        }
        if self.classes == 0 {
            return Err(ArchError::field("classes", "need at least one class"));
        }
        let [c, h, w] = self.input;
        if c == 0 {
            return Err(ArchError::field("input", "need at least one input channel"));
        }
        if h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(ArchError::field(
                "input",
                format!("{h}x{w} too small for the downsampling stages (minimum {MIN_SPATIAL}x{MIN_SPATIAL})"),
            ));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.groups.iter().sum()
    }

    /// Output channels of every block in group `g` (0-based).
    pub fn group_width(&self, g: usize) -> usize {
        match self.block_type {
            BlockType::Basic => self.widths[g],
            BlockType::Bottleneck => self.width_factor * self.widths[g],
        }
    }
}

/// Weighted-layer count: convolutions inside residual blocks plus the stem
/// convolution and the classifier. Shortcut projections are not counted.
pub fn count_depth(spec: &ArchSpec) -> usize {
    spec.block_type.layers() * spec.total_blocks() + 2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DepthReport {
    pub computed: usize,
    pub declared: Option<usize>,
    pub warning: Option<String>,
}

/// Computes depth and compares it against the labelled depth, warning (not
/// failing) when they disagree.
pub fn depth_report(spec: &ArchSpec) -> DepthReport {
    let computed = count_depth(spec);
    let warning = spec.depth.filter(|&d| d != computed).map(|d| {
        format!(
            "labelled depth {d} disagrees with {} blocks {:?}, which give {computed} weighted layers",
            match spec.block_type {
                BlockType::Basic => "basic",
                BlockType::Bottleneck => "bottleneck",
            },
            spec.groups
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    DepthReport {
        computed,
        declared: spec.depth,
        warning,
    }
}

/// `(inner, outer)` channel widths of the bottleneck blocks in each group.
pub fn bottleneck_widths(spec: &ArchSpec) -> Result<[(usize, usize); 4], ArchError> {
    if spec.block_type != BlockType::Bottleneck {
        return Err(ArchError::field("block_type", "bottleneck widths requested for a basic-block spec"));
    }
    if ![1, 2, 4].contains(&spec.width_factor) {
        return Err(ArchError::field("k", format!("width factor {} not in {{1, 2, 4}}", spec.width_factor)));
    }
    Ok(std::array::from_fn(|g| (spec.widths[g], spec.width_factor * spec.widths[g])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_table() {
        let input = [3, 224, 224];
        assert_eq!(count_depth(&ArchSpec::basic([3, 4, 6, 3], 8, input)), 34);
        assert_eq!(count_depth(&ArchSpec::basic([5, 6, 12, 5], 8, input)), 58);
        assert_eq!(count_depth(&ArchSpec::bottleneck([3, 4, 6, 3], 4, 8, input)), 50);
        assert_eq!(count_depth(&ArchSpec::bottleneck([3, 4, 23, 3], 4, 8, input)), 101);
    }

    #[test]
    fn labelled_depth_mismatch_warns() {
        let mut spec = ArchSpec::basic([7, 8, 14, 7], 8, [3, 64, 64]);
        spec.depth = Some(82);
        let r = depth_report(&spec);
        assert_eq!(r.computed, 74);
        assert!(r.warning.is_some());
        spec.depth = Some(74);
        assert!(depth_report(&spec).warning.is_none());
    }

    #[test]
    fn bottleneck_width_examples() {
        let spec = ArchSpec::bottleneck([1, 1, 1, 1], 4, 2, [3, 32, 32]);
        assert_eq!(bottleneck_widths(&spec).unwrap()[0], (64, 256));
        let spec = ArchSpec::bottleneck([1, 1, 1, 1], 1, 2, [3, 32, 32]);
        assert_eq!(bottleneck_widths(&spec).unwrap()[0], (64, 64));
        let spec = ArchSpec::bottleneck([1, 1, 1, 1], 2, 2, [3, 32, 32]);
        assert_eq!(bottleneck_widths(&spec).unwrap()[3], (512, 1024));
        let mut bad = spec.clone();
        bad.width_factor = 3;
        assert!(matches!(bottleneck_widths(&bad), Err(ArchError::InvalidField { field: "k", .. })));
        assert!(bottleneck_widths(&ArchSpec::basic([1, 1, 1, 1], 2, [3, 32, 32])).is_err());
    }

    #[test]
    fn validation_names_field() {
        let spec = ArchSpec::basic([3, 4, 6, 3], 8, [3, 32, 32]);
        assert!(spec.validate().is_ok());
        let err = spec.clone().with_levels(4).validate().unwrap_err();
        assert!(matches!(err, ArchError::InvalidField { field: "m", .. }));
        let mut small = spec.clone();
        small.input = [3, 4, 4];
        assert!(matches!(small.validate(), Err(ArchError::InvalidField { field: "input", .. })));
        let mut zero = spec;
        zero.groups = [3, 0, 6, 3];
        assert!(matches!(zero.validate(), Err(ArchError::InvalidField { field: "groups", .. })));
    }

    #[test]
    fn text_format_roundtrip() {
        let text = r#"
block_type = "bottleneck"
groups = [3, 4, 6, 3]
m = 3
k = 2
policy = "A+B"
order = "pre"
classes = 8
input = [3, 32, 32]
"#;
        let spec = ArchSpec::parse(text).unwrap();
        assert_eq!(spec.width_factor, 2);
        assert_eq!(spec.widths, DEFAULT_WIDTHS);
        assert_eq!(ArchSpec::parse(&spec.to_text()).unwrap(), spec);
        assert!(matches!(ArchSpec::parse("block_type = \"basic\""), Err(ArchError::Parse(_))));
    }
}
