//! Endpoint selection. `http(s)://` URLs reach an OpenAI-compatible server;
//! `synthetic://?seed=S&n=N[&checkpoint=PATH]` serves a generated world,
//! optionally answering awareness prompts with a trained toy model.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use kbound::probe::{CompletionEndpoint, EndpointConfig};
use kbound::synthetic::{SyntheticEndpoint, SyntheticWorld, WorldConfig};
use kbound::toy_trainer::Checkpoint;

/// Environment variable holding the API key for HTTP endpoints.
pub const API_KEY_VAR: &str = "KBOUND_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub enum EndpointSpec {
    Http,
    Synthetic {
        world: WorldConfig,
        checkpoint: Option<PathBuf>,
    },
}

impl EndpointSpec {
    pub fn parse(url: &str) -> anyhow::Result<Self> {
        if url.starts_with("http://") || url.starts_with("https://") {
            return Ok(EndpointSpec::Http);
        }
        let Some(rest) = url.strip_prefix("synthetic://") else {
            bail!("`{url}` is neither an http(s) URL nor synthetic://");
        };
        let query = rest.trim_start_matches('/').trim_start_matches('?');
        let mut world = WorldConfig::default();
        let mut checkpoint = None;
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (key, value) = pair.split_once('=').unwrap_or((pair, ""));
            match key {
                "seed" => world.seed = value.parse().with_context(|| format!("synthetic seed `{value}`"))?,
                "n" => world.questions = value.parse().with_context(|| format!("synthetic n `{value}`"))?,
                "checkpoint" => checkpoint = Some(PathBuf::from(value)),
                other => bail!("unknown synthetic endpoint parameter `{other}`"),
            }
        }
        let problems = world.violations();
        if !problems.is_empty() {
            bail!("synthetic world: {}", problems.join("; "));
        }
        Ok(EndpointSpec::Synthetic { world, checkpoint })
    }

    pub fn url(world: &WorldConfig) -> String {
        format!("synthetic://?seed={}&n={}", world.seed, world.questions)
    }
}

pub struct Backend {
    pub endpoint: Box<dyn CompletionEndpoint>,
    pub world: Option<Arc<SyntheticWorld>>,
    /// Checkpoint the endpoint answers with, when there is one.
    pub checkpoint: Option<PathBuf>,
}

impl Backend {
    pub fn connect(cfg: &EndpointConfig) -> anyhow::Result<Self> {
        match EndpointSpec::parse(&cfg.base_url)? {
            EndpointSpec::Http => Ok(Backend {
                endpoint: Box::new(cfg.http_endpoint(std::env::var(API_KEY_VAR).ok())),
                world: None,
                checkpoint: None,
            }),
            EndpointSpec::Synthetic { world, checkpoint } => {
                let world = Arc::new(SyntheticWorld::generate(world)?);
                let endpoint = match &checkpoint {
                    None => SyntheticEndpoint::reference(world.clone()),
                    Some(path) => {
                        let model = Checkpoint::load(path)?.into_model()?;
                        let name = if cfg.model.is_empty() { "toy".to_owned() } else { cfg.model.clone() };
                        SyntheticEndpoint::with_model(world.clone(), model, name)
                    }
                };
                Ok(Backend {
                    endpoint: Box::new(endpoint),
                    world: Some(world),
                    checkpoint,
                })
            }
        }
    }

    pub fn world(&self) -> anyhow::Result<&Arc<SyntheticWorld>> {
        self.world
            .as_ref()
            .context("this subcommand needs a synthetic:// endpoint, whose world supplies the model features")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_synthetic_urls() {
        let spec = EndpointSpec::parse("synthetic://?seed=7&n=120&checkpoint=out/c.json").unwrap();
        let EndpointSpec::Synthetic { world, checkpoint } = spec else {
            panic!("expected a synthetic endpoint")
        };
        assert_eq!((world.seed, world.questions), (7, 120));
        assert_eq!(checkpoint, Some(PathBuf::from("out/c.json")));
        assert_eq!(EndpointSpec::parse("https://api.example.com/v1").unwrap(), EndpointSpec::Http);
    }

    #[test]
    fn rejects_unknown_schemes_and_parameters() {
        assert!(EndpointSpec::parse("ftp://x").is_err());
        assert!(EndpointSpec::parse("synthetic://?colour=red").is_err());
        assert!(EndpointSpec::parse("synthetic://?n=0").is_err());
    }

    #[test]
    fn url_round_trips() {
        let w = WorldConfig {
            seed: 3,
            questions: 40,
            ..WorldConfig::default()
        };
        let EndpointSpec::Synthetic { world, .. } = EndpointSpec::parse(&EndpointSpec::url(&w)).unwrap() else {
            panic!()
        };
        assert_eq!(world, w);
    }
}
