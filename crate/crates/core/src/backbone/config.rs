use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn valid_names() -> String {
                Self::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", ")
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} '{}' (valid: {})",
                        stringify!($name),
                        other,
                        Self::valid_names()
                    ))),
                }
            }
        }
    };
}

named_enum!(
    /// How a decoder block merges the long skip branch into the main branch.
    SkipMode {
        ConcatLinear => "concat_linear",
        Add => "add",
        LinearAdd => "linear_add",
        AddLinear => "add_linear",
        None => "none",
    }
);

named_enum!(
    /// Time as a prepended token, or through adaptive layer norm.
    TimeMode {
        Token => "token",
        AdaLn => "adaln",
    }
);

named_enum!(
    /// Placement of the 3x3 output convolution.
    ConvMode {
        AfterLinear => "after_linear",
        BeforeLinear => "before_linear",
        None => "none",
    }
);

named_enum!(
    PatchEmbedMode {
        Linear => "linear",
        ConvStack => "conv_stack",
    }
);

named_enum!(
    PosEmbedMode {
        Learnable1d => "learnable_1d",
        Sinusoidal2d => "sinusoidal_2d",
        None => "none",
    }
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditionKind {
    None,
    Class { num_classes: usize },
    Context { context_dim: usize, max_len: usize },
}

impl ConditionKind {
    /// Number of condition tokens in the sequence.
    pub fn token_count(&self) -> usize {
        match self {
            ConditionKind::None => 0,
            ConditionKind::Class { .. } => 1,
            ConditionKind::Context { max_len, .. } => *max_len,
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionKind::None => f.write_str("none"),
            ConditionKind::Class { num_classes } => write!(f, "class:{num_classes}"),
            ConditionKind::Context {
                context_dim,
                max_len,
            } => write!(f, "context:{context_dim}:{max_len}"),
        }
    }
}

impl FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad number '{v}' in condition '{s}'")))
        };
        match parts.as_slice() {
            ["none"] => Ok(ConditionKind::None),
            ["class", k] => Ok(ConditionKind::Class {
                num_classes: num(k)?,
            }),
            ["context", d, l] => Ok(ConditionKind::Context {
                context_dim: num(d)?,
                max_len: num(l)?,
            }),
            _ => Err(Error::Config(format!(
                "unknown condition '{s}' (valid: none, class:K, context:DIM:LEN)"
            ))),
        }
    }
}

/// Architecture hyperparameters plus the ablation selectors.
#[derive(Clone, Debug, PartialEq)]
pub struct UViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Total transformer layers; must be odd.
    pub depth: usize,
    pub hidden_size: usize,
    pub mlp_size: usize,
    pub num_heads: usize,
    pub skip_mode: SkipMode,
    pub time_mode: TimeMode,
    pub conv_mode: ConvMode,
    pub patch_embed_mode: PatchEmbedMode,
    pub pos_embed_mode: PosEmbedMode,
    pub condition: ConditionKind,
    /// Number of diffusion steps the timestep input ranges over.
    pub diffusion_steps: usize,
}

impl UViTConfig {
    /// Default variant selectors around the given shape.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_size: usize,
        channels: usize,
        patch_size: usize,
        depth: usize,
        hidden_size: usize,
        mlp_size: usize,
        num_heads: usize,
        condition: ConditionKind,
    ) -> Self {
        Self {
            image_height: image_size,
            image_width: image_size,
            channels,
            patch_size,
            depth,
            hidden_size,
            mlp_size,
            num_heads,
            skip_mode: SkipMode::ConcatLinear,
            time_mode: TimeMode::Token,
            conv_mode: ConvMode::AfterLinear,
            patch_embed_mode: PatchEmbedMode::Linear,
            pos_embed_mode: PosEmbedMode::Learnable1d,
            condition,
            diffusion_steps: crate::schedule::DEFAULT_STEPS,
        }
    }

    /// U-ViT-Small on 32x32x3 (CIFAR-10), P = 2, unconditional.
    pub fn small_cifar10() -> Self {
        Self::new(32, 3, 2, 13, 512, 2048, 8, ConditionKind::None)
    }

    /// U-ViT-Small-Deep on 32x32x4 latents with 77 text tokens of width 768.
    pub fn small_deep_text() -> Self {
        Self::new(
            32,
            4,
            2,
            17,
            512,
            2048,
            8,
            ConditionKind::Context {
                context_dim: 768,
                max_len: 77,
            },
        )
    }

    /// U-ViT-Mid on class-conditional 64x64x3, P = 4.
    pub fn mid_imagenet64() -> Self {
        Self::new(
            64,
            3,
            4,
            17,
            768,
            3072,
            12,
            ConditionKind::Class { num_classes: 1000 },
        )
    }

    /// U-ViT-Large on class-conditional 64x64x3, P = 4.
    pub fn large_imagenet64() -> Self {
        Self::new(
            64,
            3,
            4,
            21,
            1024,
            4096,
            16,
            ConditionKind::Class { num_classes: 1000 },
        )
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Tokens preceding the patch tokens (time and condition).
    pub fn extra_tokens(&self) -> usize {
        let time = usize::from(self.time_mode == TimeMode::Token);
        time + self.condition.token_count()
    }

    pub fn seq_len(&self) -> usize {
        self.extra_tokens() + self.num_patches()
    }

    /// Encoder (and decoder) block count, `(L - 1) / 2`.
    pub fn half_depth(&self) -> usize {
        (self.depth - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("depth", self.depth),
            ("hidden_size", self.hidden_size),
            ("mlp_size", self.mlp_size),
            ("num_heads", self.num_heads),
            ("diffusion_steps", self.diffusion_steps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return err(format!("{k} must be positive"));
            }
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return err(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.depth.is_multiple_of(2) {
            return err(format!("depth must be odd, got {}", self.depth));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return err(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if !self.hidden_size.is_multiple_of(2) {
            return err("hidden_size must be even for the sinusoidal time embedding".into());
        }
        if self.pos_embed_mode == PosEmbedMode::Sinusoidal2d && !self.hidden_size.is_multiple_of(4) {
            return err("sinusoidal_2d position embedding needs hidden_size divisible by 4".into());
        }
        if self.patch_embed_mode == PatchEmbedMode::ConvStack && self.hidden_size < 2 {
            return err("conv_stack patch embedding needs hidden_size >= 2".into());
        }
        match self.condition {
            ConditionKind::Class { num_classes: 0 } => {
                return err("class conditioning needs at least one class".into())
            }
            ConditionKind::Context {
                context_dim,
                max_len,
            } if context_dim == 0 || max_len == 0 => {
                return err("context conditioning needs positive dim and length".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "image_height",
        "image_width",
        "channels",
        "patch_size",
        "depth",
        "hidden_size",
        "mlp_size",
        "num_heads",
        "skip_mode",
        "time_mode",
        "conv_mode",
        "patch_embed_mode",
        "pos_embed_mode",
        "condition",
        "diffusion_steps",
    ];

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let v = [
            self.image_height.to_string(),
            self.image_width.to_string(),
            self.channels.to_string(),
            self.patch_size.to_string(),
            self.depth.to_string(),
            self.hidden_size.to_string(),
            self.mlp_size.to_string(),
            self.num_heads.to_string(),
            self.skip_mode.to_string(),
            self.time_mode.to_string(),
            self.conv_mode.to_string(),
            self.patch_embed_mode.to_string(),
            self.pos_embed_mode.to_string(),
            self.condition.to_string(),
            self.diffusion_steps.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(v)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = || {
            value
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got '{value}'")))
        };
        match key {
            "image_size" => {
                let v = num()?;
                self.image_height = v;
                self.image_width = v;
            }
            "image_height" => self.image_height = num()?,
            "image_width" => self.image_width = num()?,
            "channels" => self.channels = num()?,
            "patch_size" => self.patch_size = num()?,
            "depth" => self.depth = num()?,
            "hidden_size" => self.hidden_size = num()?,
            "mlp_size" => self.mlp_size = num()?,
            "num_heads" => self.num_heads = num()?,
            "skip_mode" => self.skip_mode = value.parse()?,
            "time_mode" => self.time_mode = value.parse()?,
            "conv_mode" => self.conv_mode = value.parse()?,
            "patch_embed_mode" => self.patch_embed_mode = value.parse()?,
            "pos_embed_mode" => self.pos_embed_mode = value.parse()?,
            "condition" => self.condition = value.parse()?,
            "diffusion_steps" => self.diffusion_steps = num()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::small_cifar10();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
