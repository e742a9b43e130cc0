//! JSON-lines logging on standard error.

use std::io::Write;
use std::sync::OnceLock;

use log::LevelFilter;

static SUBCOMMAND: OnceLock<&'static str> = OnceLock::new();

/// Installs the logger. `RUST_LOG` overrides `default_level`.
pub fn init(subcommand: &'static str, default_level: LevelFilter) {
    let _ = SUBCOMMAND.set(subcommand);
    let _ = env_logger::Builder::new()
        .filter_level(default_level)
        .parse_default_env()
        .format(|buf, record| {
            let line = serde_json::json!({
                "timestamp": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "subcommand": SUBCOMMAND.get().copied().unwrap_or("-"),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}
