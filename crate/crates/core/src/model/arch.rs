use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// Denoising on sRGB patches.
    Srgb,
    /// Reserved for a RAW front end; not built.
    Raw,
}

/// Layer widths of the encoder and of every decoder.
///
/// Encoder: five 3x3 convs (stride 2 on the second and fourth), two hidden
/// dense layers, then the mean, log-variance and logit heads.
/// Decoder: dense to a `(D/4)^2 * dec[0]` grid, then five 3x3 transposed
/// convs with widths `dec[1..]` and the patch channels, upsampling 2x after
/// the first and third.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ArchDescriptor {
    pub input: InputKind,
    pub patch_size: usize,
    pub channels: usize,
    pub enc: [usize; 5],
    pub hidden: usize,
    pub dec: [usize; 5],
}

impl ArchDescriptor {
    pub const ENCODER_STRIDES: [usize; 5] = [1, 2, 1, 2, 1];

    pub fn srgb(patch_size: usize) -> Self {
        ArchDescriptor {
            input: InputKind::Srgb,
            patch_size,
            channels: 3,
            enc: [16, 32, 32, 64, 64],
            hidden: 128,
            dec: [64, 64, 32, 32, 16],
        }
    }

    /// Narrow variant for quick experiments on a single core.
    pub fn compact(patch_size: usize) -> Self {
        ArchDescriptor {
            enc: [8, 16, 16, 32, 32],
            hidden: 64,
            dec: [32, 32, 16, 16, 8],
            ..Self::srgb(patch_size)
        }
    }

    /// Side of the coarsest feature map.
    pub fn bottleneck(&self) -> usize {
        self.patch_size / 4
    }

    pub fn flat_features(&self) -> usize {
        self.bottleneck().pow(2) * self.enc[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == InputKind::Raw {
            return Err(Error::Construction {
                layer: "input".into(),
                detail: "the RAW front end is reserved and not implemented".into(),
            });
        }
        if self.patch_size < 4 || !self.patch_size.is_multiple_of(4) {
            return Err(Error::Construction {
                layer: "enc.conv3".into(),
                detail: format!("patch size {} must be a positive multiple of 4 for two stride-2 stages", self.patch_size),
            });
        }
        if self.channels == 0 {
            return Err(Error::Construction { layer: "enc.conv0".into(), detail: "zero input channels".into() });
        }
        for (i, &w) in self.enc.iter().enumerate() {
            if w == 0 {
                return Err(Error::Construction { layer: format!("enc.conv{i}"), detail: "zero width".into() });
            }
        }
        if self.hidden == 0 {
            return Err(Error::Construction { layer: "enc.fc0".into(), detail: "zero width".into() });
        }
        for (i, &w) in self.dec.iter().enumerate() {
            if w == 0 {
                let layer = if i == 0 { "dec.fc".to_string() } else { format!("dec.tconv{}", i - 1) };
                return Err(Error::Construction { layer, detail: "zero width".into() });
            }
        }
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.input {
            InputKind::Srgb => "srgb",
            InputKind::Raw => "raw",
        };
        write!(
            f,
            "{kind};d={};c={};enc={};hidden={};dec={}",
            self.patch_size,
            self.channels,
            join(&self.enc),
            self.hidden,
            join(&self.dec)
        )
    }
}

fn parse_widths(key: &str, v: &str) -> Result<[usize; 5]> {
    let parsed: Vec<usize> = v
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("architecture `{key}`: {e}")))?;
    <[usize; 5]>::try_from(parsed.as_slice())
        .map_err(|_| Error::Config(format!("architecture `{key}` needs exactly 5 widths, got {}", parsed.len())))
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';');
        let input = match parts.next().map(str::trim) {
            Some("srgb") => InputKind::Srgb,
            Some("raw") => InputKind::Raw,
            other => return Err(Error::Config(format!("unknown architecture kind {other:?}"))),
        };
        let mut arch = ArchDescriptor { input, ..ArchDescriptor::srgb(16) };
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed architecture field `{part}`")))?;
            let num = || value.trim().parse::<usize>().map_err(|e| Error::Config(format!("architecture `{key}`: {e}")));
            match key.trim() {
                "d" => arch.patch_size = num()?,
                "c" => arch.channels = num()?,
                "hidden" => arch.hidden = num()?,
                "enc" => arch.enc = parse_widths(key, value)?,
                "dec" => arch.dec = parse_widths(key, value)?,
                other => return Err(Error::Config(format!("unknown architecture field `{other}`"))),
            }
        }
        Ok(arch)
    }
}

impl TryFrom<String> for ArchDescriptor {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ArchDescriptor> for String {
    fn from(a: ArchDescriptor) -> String {
        a.to_string()
    }
}
