use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use dpsir_core::engine::{ClockKind, EngineConfig, DEFAULT_K};
use dpsir_core::fixtures::{self, FIXTURE_EMBEDDING_DIM};
use dpsir_core::gateway::fixture::{FixtureProvider, FixtureSet};
use dpsir_core::gateway::remote::RemoteProvider;
use dpsir_core::gateway::{LlmProvider, ProviderConfig, ProviderKind};

/// Where completions and embeddings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSettings {
    /// Keyed replies read from a fixture directory (`responses/` inside it,
    /// or the directory itself).
    Fixture { dir: PathBuf },
    Remote {
        base_url: Option<String>,
        api_key_var: Option<String>,
        config: ProviderConfig,
    },
}

impl ProviderSettings {
    pub fn shipped_fixtures() -> Self {
        ProviderSettings::Fixture {
            dir: fixtures::shipped_dir(),
        }
    }

    pub fn kind(&self) -> ProviderKind {
        match self {
            ProviderSettings::Fixture { .. } => ProviderKind::Fixture,
            ProviderSettings::Remote { .. } => ProviderKind::RemoteHttp,
        }
    }

    pub fn build(&self) -> anyhow::Result<Arc<dyn LlmProvider>> {
        Ok(match self {
            ProviderSettings::Fixture { dir } => {
                let responses = dir.join("responses");
                let dir = if responses.is_dir() { responses } else { dir.clone() };
                let set = FixtureSet::read_dir(&dir)
                    .with_context(|| format!("reading fixture responses from {}", dir.display()))?;
                Arc::new(FixtureProvider::new(set).with_embedding_dim(FIXTURE_EMBEDDING_DIM))
            }
            ProviderSettings::Remote {
                base_url,
                api_key_var,
                config,
            } => Arc::new(
                RemoteProvider::from_env(base_url.as_deref(), api_key_var.as_deref())?.with_config(config.clone()),
            ),
        })
    }

    /// Engine settings for this provider. Fixture runs use a logical clock so
    /// that repeated runs produce identical workspaces.
    pub fn engine_config(&self, k: usize) -> EngineConfig {
        EngineConfig {
            k,
            clock: match self {
                ProviderSettings::Fixture { .. } => ClockKind::Logical,
                ProviderSettings::Remote { .. } => ClockKind::System,
            },
            ..EngineConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub workspace: PathBuf,
    pub provider: ProviderSettings,
    pub k: usize,
    /// Allowed browser origins; empty disables cross-origin access.
    pub cors: Vec<String>,
    /// Shared bearer token required on every route except `/health`.
    pub token: Option<String>,
}

impl ApiConfig {
    pub fn new(workspace: impl Into<PathBuf>, provider: ProviderSettings) -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            workspace: workspace.into(),
            provider,
            k: DEFAULT_K,
            cors: Vec::new(),
            token: None,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if !self.workspace.is_dir() {
            bail!("workspace {} does not exist", self.workspace.display());
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        self.provider.engine_config(self.k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ApiConfig::new(dir.path(), ProviderSettings::shipped_fixtures());
        assert_eq!(c.k, DEFAULT_K);
        c.validate().unwrap();
        c.k = 0;
        assert!(c.validate().is_err());
        c.k = 1;
        c.workspace = dir.path().join("missing");
        assert!(c.validate().is_err());
    }

    #[test]
    fn fixture_runs_use_a_logical_clock() {
        assert_eq!(
            ProviderSettings::shipped_fixtures().engine_config(3).clock,
            ClockKind::Logical
        );
        assert_eq!(ProviderSettings::shipped_fixtures().engine_config(3).k, 3);
        let remote = ProviderSettings::Remote {
            base_url: None,
            api_key_var: Some("DPSIR_TEST_UNSET_KEY".into()),
            config: ProviderConfig::new(ProviderKind::RemoteHttp),
        };
        assert_eq!(remote.engine_config(5).clock, ClockKind::System);
        assert!(remote.build().is_err());
        assert!(ProviderSettings::shipped_fixtures().build().is_ok());
    }
}
