use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;

pub const MODEL_PATH_VAR: &str = "ICONTRA_MODEL_PATH";
pub const DATA_DIR_VAR: &str = "ICONTRA_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "icontra-data";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Reference model config; the built-in default when unset.
    pub model_path: Option<PathBuf>,
    pub addr: SocketAddr,
}

impl ServiceConfig {
    /// Reads `ICONTRA_DATA_DIR` and `ICONTRA_MODEL_PATH`.
    pub fn from_env(port: u16) -> Self {
        Self::from_lookup(port, |k| std::env::var(k).ok())
    }

    pub fn from_lookup(port: u16, var: impl Fn(&str) -> Option<String>) -> Self {
        let nonempty = |k: &str| var(k).filter(|v| !v.trim().is_empty());
        Self {
            data_dir: nonempty(DATA_DIR_VAR).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from),
            model_path: nonempty(MODEL_PATH_VAR).map(PathBuf::from),
            addr: SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn environment_overrides_defaults() {
        let cfg = ServiceConfig::from_lookup(9000, |_| None);
        assert_eq!(cfg.data_dir, PathBuf::from(DEFAULT_DATA_DIR));
        assert_eq!(cfg.model_path, None);
        assert_eq!(cfg.addr.port(), 9000);

        let cfg = ServiceConfig::from_lookup(DEFAULT_PORT, |k| match k {
            DATA_DIR_VAR => Some("/srv/icontra".into()),
            MODEL_PATH_VAR => Some(" ".into()),
            _ => None,
        });
        assert_eq!(cfg.data_dir, PathBuf::from("/srv/icontra"));
        assert_eq!(cfg.model_path, None);
    }
}
