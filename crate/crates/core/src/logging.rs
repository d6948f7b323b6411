//! Minimal stderr logging gated by the `LEXIPSE_LOG` environment variable.
//!
//! Levels are `error`, `info` (default) and `debug`. Anything at or below the
//! configured level is written to stderr.

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Error = 0,
    Info = 1,
    Debug = 2,
}

fn configured_level() -> Level {
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        match std::env::var("LEXIPSE_LOG").as_deref() {
            Ok("error") => Level::Error,
            Ok("debug") => Level::Debug,
            // Unknown values fall back to the default rather than erroring.
            _ => Level::Info,
        }
    })
}

pub fn warn(msg: impl AsRef<str>) {
    if configured_level() >= Level::Info {
        eprintln!("[warn] {}", msg.as_ref());
    }
}

pub fn info(msg: impl AsRef<str>) {
    if configured_level() >= Level::Info {
        eprintln!("[info] {}", msg.as_ref());
    }
}

pub fn debug(msg: impl AsRef<str>) {
    if configured_level() >= Level::Debug {
        eprintln!("[debug] {}", msg.as_ref());
    }
}
