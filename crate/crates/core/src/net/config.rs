use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::CONF_WIDTH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Streams {
    pub img: bool,
    pub pb: bool,
    pub conf: bool,
}

impl Streams {
    pub const ALL: Streams = Streams {
        img: true,
        pb: true,
        conf: true,
    };

    pub fn any(&self) -> bool {
        self.img || self.pb || self.conf
    }
}

impl fmt::Display for Streams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.img, "img"), (self.pb, "pb"), (self.conf, "conf")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for Streams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Streams {
            img: false,
            pb: false,
            conf: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "img" => out.img = true,
                "pb" => out.pb = true,
                "conf" => out.conf = true,
                other => return Err(Error::Argument(format!("unknown stream {other:?}"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of each conv/ReLU/max-pool block.
    pub conv_channels: Vec<usize>,
    /// Per-stream embedding width.
    pub n1: usize,
    /// Number of training identities.
    pub n3: usize,
    pub streams: Streams,
    pub aux_losses: bool,
}

impl NetConfig {
    /// 64x32 inputs, 8/16 conv channels, 64-wide embeddings.
    pub fn toy(n3: usize) -> Self {
        NetConfig {
            input_h: 64,
            input_w: 32,
            conv_channels: vec![8, 16],
            n1: 64,
            n3,
            streams: Streams::ALL,
            aux_losses: true,
        }
    }

    /// AlexNet-sized FC widths on Market-1501 (751 training identities).
    pub fn alexnet_scale() -> Self {
        NetConfig {
            n1: 4096,
            n3: 751,
            ..NetConfig::toy(751)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n3 < 2 {
            return Err(Error::Argument(format!("n3 must be at least 2, got {}", self.n3)));
        }
        if !self.streams.any() {
            return Err(Error::Argument("at least one stream must be enabled".into()));
        }
        if self.n1 == 0 || self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Argument("layer widths must be positive".into()));
        }
        let div = 1usize << self.conv_channels.len();
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(div) || !self.input_w.is_multiple_of(div) {
            return Err(Error::Argument(format!(
                "input {}x{} must be a positive multiple of {div}",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Width of the flattened feature map feeding each stream's FC layer.
    pub fn flat_width(&self) -> usize {
        let div = 1usize << self.conv_channels.len();
        self.conv_channels.last().copied().unwrap_or(0) * (self.input_h / div) * (self.input_w / div)
    }

    /// Full concatenation width seen by the fused classifier; disabled streams
    /// occupy their slot with zeros.
    pub fn concat_width(&self) -> usize {
        2 * self.n1 + CONF_WIDTH
    }

    /// Width of the extracted concat embedding: enabled streams only.
    pub fn embedding_width(&self) -> usize {
        let s = self.streams;
        (s.img as usize) * self.n1 + (s.pb as usize) * self.n1 + (s.conf as usize) * CONF_WIDTH
    }
}

/// Full model, single-removal ablations, and single-stream baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoPoseBox,
    NoImg,
    NoConf,
    NoAux,
    Baseline1,
    Baseline2,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPoseBox,
        Variant::NoImg,
        Variant::NoConf,
        Variant::NoAux,
        Variant::Baseline1,
        Variant::Baseline2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPoseBox => "-posebox",
            Variant::NoImg => "-img",
            Variant::NoConf => "-confidence",
            Variant::NoAux => "-aux-losses",
            Variant::Baseline1 => "baseline1",
            Variant::Baseline2 => "baseline2",
        }
    }

    /// Applies this variant's stream and loss switches to `base`.
    pub fn apply(self, base: &NetConfig) -> NetConfig {
        let mut c = base.clone();
        c.streams = Streams::ALL;
        c.aux_losses = true;
        match self {
            Variant::Full => {}
            Variant::NoPoseBox => c.streams.pb = false,
            Variant::NoImg => c.streams.img = false,
            Variant::NoConf => c.streams.conf = false,
            Variant::NoAux => c.aux_losses = false,
            Variant::Baseline1 => {
                c.streams = Streams {
                    img: true,
                    pb: false,
                    conf: false,
                };
                c.aux_losses = false;
            }
            Variant::Baseline2 => {
                c.streams = Streams {
                    img: false,
                    pb: true,
                    conf: false,
                };
                c.aux_losses = false;
            }
        }
        c
    }

    pub fn needs_posebox(self) -> bool {
        self.apply(&NetConfig::toy(2)).streams.pb
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s || v.as_str().trim_start_matches('-') == s)
            .ok_or_else(|| Error::Argument(format!("unknown configuration {s:?}")))
    }
}

/// Identification-model baseline configurations: one image stream, one loss.
pub fn baseline_config(kind: Variant, base: &NetConfig) -> Result<NetConfig> {
    match kind {
        Variant::Baseline1 | Variant::Baseline2 => Ok(kind.apply(base)),
        other => Err(Error::Argument(format!("{other} is not a baseline"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// The learning rate drops 10x every this many epochs.
    pub lr_decay_every: usize,
    pub batch_size: usize,
}

/// 36 epochs, lr 0.01 dropping 10x every 6 epochs: the schedule for
/// fine-tuning pretrained networks.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 36,
            lr0: 0.01,
            lr_decay_every: 6,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    /// Schedule for toy networks trained from scratch on a few hundred images.
    pub fn desk_scale() -> Self {
        TrainConfig {
            epochs: 12,
            lr0: 0.02,
            lr_decay_every: 8,
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Argument("batch_size and lr_decay_every must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Argument(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Flat `key=value` configuration file covering [`NetConfig`] and
/// [`TrainConfig`]. `n3` may be omitted and filled in from the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub net: NetConfig,
    pub n3_given: bool,
    pub train: TrainConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            net: NetConfig::toy(2),
            n3_given: false,
            train: TrainConfig::desk_scale(),
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| Error::Argument(format!("config line {}: {m}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key=value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let usize_of = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad integer {v:?}")));
            match key {
                "input_h" => cfg.net.input_h = usize_of(value)?,
                "input_w" => cfg.net.input_w = usize_of(value)?,
                "conv_channels" => {
                    cfg.net.conv_channels = value
                        .split(',')
                        .map(|v| usize_of(v.trim()))
                        .collect::<Result<_>>()?
                }
                "n1" => cfg.net.n1 = usize_of(value)?,
                "n2" => {
                    if usize_of(value)? != CONF_WIDTH {
                        return Err(bad(format!("n2 is fixed at {CONF_WIDTH}")));
                    }
                }
                "n3" => {
                    cfg.net.n3 = usize_of(value)?;
                    cfg.n3_given = true;
                }
                "streams" => cfg.net.streams = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "aux_losses" => {
                    cfg.net.aux_losses = value
                        .parse::<bool>()
                        .map_err(|_| bad(format!("bad boolean {value:?}")))?
                }
                "epochs" => cfg.train.epochs = usize_of(value)?,
                "lr0" => {
                    cfg.train.lr0 = value
                        .parse::<f64>()
                        .map_err(|_| bad(format!("bad number {value:?}")))?
                }
                "lr_decay_every" => cfg.train.lr_decay_every = usize_of(value)?,
                "batch_size" => cfg.train.batch_size = usize_of(value)?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let n = &self.net;
        let t = &self.train;
        let channels: Vec<String> = n.conv_channels.iter().map(|c| c.to_string()).collect();
        let mut s = format!(
            "input_h={}\ninput_w={}\nconv_channels={}\nn1={}\n",
            n.input_h,
            n.input_w,
            channels.join(","),
            n.n1
        );
        if self.n3_given {
            s.push_str(&format!("n3={}\n", n.n3));
        }
        s.push_str(&format!(
            "streams={}\naux_losses={}\nepochs={}\nlr0={}\nlr_decay_every={}\nbatch_size={}\n",
            n.streams, n.aux_losses, t.epochs, t.lr0, t.lr_decay_every, t.batch_size
        ));
        s
    }
}
