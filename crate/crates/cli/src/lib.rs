//! Command-line and HTTP front ends over `facectl-core`.

pub mod commands;
pub mod config;
pub mod server;
pub mod session;

use facectl_core::editor::{ablation_strategies, MaskStrategy};
use facectl_core::face::FaceParams;
use facectl_core::imageio::Image;

pub use config::{Config, ConfigError};

/// Parses `A`..`F`, `linear`, `constant:<rho>` or `two-phase:<early>,<late>`.
pub fn parse_strategy(s: &str) -> Result<MaskStrategy, String> {
    let s = s.trim();
    if let Some((_, st)) = ablation_strategies()
        .into_iter()
        .find(|(l, _)| s.len() == 1 && s.eq_ignore_ascii_case(&l.to_string()))
    {
        return Ok(st);
    }
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("bad ratio {v:?}: {e}"));
    let strategy = match s.split_once(':') {
        None if s == "linear" => MaskStrategy::Linear,
        Some(("constant", v)) => MaskStrategy::Constant { rho: parse(v)? },
        Some(("two-phase", v)) => {
            let (a, b) = v.split_once(',').ok_or("two-phase needs <early>,<late>")?;
            MaskStrategy::TwoPhase {
                rho_early: parse(a)?,
                rho_late: parse(b)?,
            }
        }
        _ => return Err(format!("unknown strategy {s:?}; use A-F, linear, constant:<rho> or two-phase:<a>,<b>")),
    };
    strategy.validate().map_err(|e| e.to_string())?;
    Ok(strategy)
}

/// Named directions in semantic space and the labels they are learned from.
pub const ATTRIBUTES: [&str; 3] = ["shape", "ambient", "yaw"];

/// Binary label for `name`, split at `threshold`.
pub fn attribute_value(name: &str, p: &FaceParams) -> Option<f64> {
    match name {
        "shape" => p.beta.first().copied(),
        "ambient" => Some(p.light[0]),
        "yaw" => Some(p.theta_global[0]),
        _ => None,
    }
}

pub fn png_base64(image: &Image) -> facectl_core::Result<String> {
    use base64::Engine;
    Ok(base64::engine::general_purpose::STANDARD.encode(image.encode_png()?))
}

pub fn decode_png_base64(s: &str) -> Result<Image, String> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| format!("not base64: {e}"))?;
    Image::decode_png(&bytes).map_err(|e| e.to_string())
}
