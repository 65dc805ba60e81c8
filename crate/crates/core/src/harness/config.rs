//! Run configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::simulator::FaultSpec;
use crate::adapters::{
    BuiltinInpainter, BuiltinTagger, Captioner, Detector, EndpointConfig, Inpainter, RemoteCaptioner,
    RemoteDetector, RemoteInpainter, RemoteTagger, Tagger, TransportKind,
};
use crate::alignment::DEFAULT_OD_SCORE_THRESHOLD;
use crate::caption::{Lemmatizer, SemanticMatcher, DEFAULT_COSINE_THRESHOLD};
use crate::error::{Error, Result};
use crate::selection::{FateThresholds, SelectionMode, DEFAULT_FOLLOWUPS, DEFAULT_T_DOWN, DEFAULT_T_UP};
use crate::transforms::TransformKind;

pub const DEFAULT_CONCURRENCY: usize = 4;

/// Environment variables that point a role at an HTTP endpoint.
pub const URL_OVERRIDES: [(&str, Role); 4] = [
    ("CAPMORPH_SUT_URL", Role::Sut),
    ("CAPMORPH_OD_URL", Role::Od),
    ("CAPMORPH_INPAINT_URL", Role::Inpaint),
    ("CAPMORPH_POS_URL", Role::Pos),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Sut,
    Od,
    Inpaint,
    Pos,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sut => "sut",
            Self::Od => "od",
            Self::Inpaint => "inpaint",
            Self::Pos => "pos",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_t_down")]
    pub t_down: f64,
    #[serde(default = "default_t_up")]
    pub t_up: f64,
    #[serde(default = "default_cosine")]
    pub cosine: f64,
    #[serde(default = "default_od_score")]
    pub od_score: f64,
}

fn default_t_down() -> f64 {
    DEFAULT_T_DOWN
}
fn default_t_up() -> f64 {
    DEFAULT_T_UP
}
fn default_cosine() -> f64 {
    DEFAULT_COSINE_THRESHOLD
}
fn default_od_score() -> f64 {
    DEFAULT_OD_SCORE_THRESHOLD
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t_down: DEFAULT_T_DOWN,
            t_up: DEFAULT_T_UP,
            cosine: DEFAULT_COSINE_THRESHOLD,
            od_score: DEFAULT_OD_SCORE_THRESHOLD,
        }
    }
}

/// Lexicon files; bundled data is used for any that are unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherFiles {
    pub vectors: Option<PathBuf>,
    pub hypernyms: Option<PathBuf>,
    pub plurals: Option<PathBuf>,
    pub pos_lexicon: Option<PathBuf>,
    /// Exact lemma equality only, no vectors and no hypernyms.
    #[serde(default)]
    pub literal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfigs {
    #[serde(default = "simulated")]
    pub sut: EndpointConfig,
    #[serde(default = "simulated")]
    pub od: EndpointConfig,
    #[serde(default = "builtin")]
    pub inpaint: EndpointConfig,
    #[serde(default = "builtin")]
    pub pos: EndpointConfig,
}

fn simulated() -> EndpointConfig {
    EndpointConfig::of_kind(TransportKind::Simulator)
}

fn builtin() -> EndpointConfig {
    EndpointConfig::of_kind(TransportKind::Builtin)
}

impl Default for AdapterConfigs {
    fn default() -> Self {
        Self {
            sut: simulated(),
            od: simulated(),
            inpaint: builtin(),
            pos: builtin(),
        }
    }
}

impl AdapterConfigs {
    pub fn get_mut(&mut self, role: Role) -> &mut EndpointConfig {
        match role {
            Role::Sut => &mut self.sut,
            Role::Od => &mut self.od,
            Role::Inpaint => &mut self.inpaint,
            Role::Pos => &mut self.pos,
        }
    }
}

/// Settings for roles served by the scene simulator. Each source image
/// `<name>.png` needs a scene file `<name>.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    /// Where scene files live; defaults to the source directory.
    pub scenes_dir: Option<PathBuf>,
    #[serde(default)]
    pub fault: FaultSpec,
    #[serde(default)]
    pub jitter: u32,
    #[serde(default)]
    pub relabel: BTreeMap<String, String>,
    #[serde(default)]
    pub missed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_followups")]
    pub followups_per_source: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "all_mrs")]
    pub mrs: Vec<TransformKind>,
    #[serde(default)]
    pub selection: SelectionMode,
    /// Also write per-source selection traces.
    #[serde(default)]
    pub verbose: bool,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub matcher: MatcherFiles,
    #[serde(default)]
    pub adapters: AdapterConfigs,
    #[serde(default)]
    pub simulator: SimulatorConfig,
}

fn default_followups() -> usize {
    DEFAULT_FOLLOWUPS
}
fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}
fn all_mrs() -> Vec<TransformKind> {
    TransformKind::ALL.to_vec()
}

impl RunConfig {
    /// Simulator-backed defaults.
    pub fn new(source_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            source_dir: source_dir.into(),
            output_dir: output_dir.into(),
            seed: 0,
            followups_per_source: DEFAULT_FOLLOWUPS,
            concurrency: DEFAULT_CONCURRENCY,
            mrs: all_mrs(),
            selection: SelectionMode::Full,
            verbose: false,
            thresholds: Thresholds::default(),
            matcher: MatcherFiles::default(),
            adapters: AdapterConfigs::default(),
            simulator: SimulatorConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.source_dir);
        fix(&mut self.output_dir);
        for p in [
            &mut self.matcher.vectors,
            &mut self.matcher.hypernyms,
            &mut self.matcher.plurals,
            &mut self.matcher.pos_lexicon,
            &mut self.simulator.scenes_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Points roles at the URLs given in `CAPMORPH_*_URL` variables.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, role) in URL_OVERRIDES {
            if let Some(url) = lookup(var).filter(|u| !u.is_empty()) {
                let ep = self.adapters.get_mut(role);
                ep.transport = TransportKind::Http;
                ep.url = Some(url);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        FateThresholds::new(self.thresholds.t_down, self.thresholds.t_up)?;
        if !(self.thresholds.cosine > 0.0) {
            return Err(Error::Config("cosine threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.thresholds.od_score) {
            return Err(Error::Config("od_score threshold must lie in [0, 1]".into()));
        }
        if self.followups_per_source == 0 {
            return Err(Error::Config("followups_per_source must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if self.mrs.is_empty() {
            return Err(Error::Config("at least one MR must be enabled".into()));
        }
        let roles = [
            (Role::Sut, &self.adapters.sut),
            (Role::Od, &self.adapters.od),
            (Role::Inpaint, &self.adapters.inpaint),
            (Role::Pos, &self.adapters.pos),
        ];
        for (role, ep) in roles {
            let ok = match ep.transport {
                TransportKind::Process => !ep.command.is_empty(),
                TransportKind::Http => ep.url.is_some(),
                TransportKind::Builtin => matches!(role, Role::Inpaint | Role::Pos),
                TransportKind::Simulator => matches!(role, Role::Sut | Role::Od),
            };
            if !ok {
                return Err(Error::Config(format!(
                    "adapter {}: transport {:?} is missing its command/url or is not available for this role",
                    role.name(),
                    ep.transport
                )));
            }
        }
        Ok(())
    }

    pub fn fate_thresholds(&self) -> FateThresholds {
        FateThresholds {
            t_down: self.thresholds.t_down,
            t_up: self.thresholds.t_up,
        }
    }

    /// Hash of everything that influences results; the output directory
    /// and concurrency are left out.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("concurrency");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn matcher(&self) -> Result<SemanticMatcher> {
        if self.matcher.literal {
            return Ok(SemanticMatcher::literal());
        }
        match (&self.matcher.vectors, &self.matcher.hypernyms) {
            (None, None) => SemanticMatcher::bundled(self.thresholds.cosine),
            (Some(v), Some(h)) => SemanticMatcher::load(v, h, self.thresholds.cosine),
            _ => Err(Error::Config("matcher.vectors and matcher.hypernyms must be given together".into())),
        }
    }

    fn lemmatizer(&self) -> Result<Lemmatizer> {
        match &self.matcher.plurals {
            Some(p) => Lemmatizer::load(p),
            None => Ok(Lemmatizer::default()),
        }
    }

    /// The inpainter and tagger, shared by every source image.
    pub fn shared_models(&self) -> Result<SharedModels> {
        let inpaint: Arc<dyn Inpainter> = match self.adapters.inpaint.transport {
            TransportKind::Builtin => Arc::new(BuiltinInpainter),
            _ => Arc::new(RemoteInpainter(self.adapters.inpaint.connect("inpaint")?)),
        };
        let tagger: Arc<dyn Tagger> = match self.adapters.pos.transport {
            TransportKind::Builtin => {
                let lem = self.lemmatizer()?;
                Arc::new(match &self.matcher.pos_lexicon {
                    Some(p) => BuiltinTagger::load(p, lem)?,
                    None => BuiltinTagger::with_lemmatizer(lem),
                })
            }
            _ => Arc::new(RemoteTagger(self.adapters.pos.connect("pos")?)),
        };
        let sut: Option<Arc<dyn Captioner>> = match self.adapters.sut.transport {
            TransportKind::Simulator => None,
            _ => Some(Arc::new(RemoteCaptioner(self.adapters.sut.connect("sut")?))),
        };
        let od: Option<Arc<dyn Detector>> = match self.adapters.od.transport {
            TransportKind::Simulator => None,
            _ => Some(Arc::new(RemoteDetector(self.adapters.od.connect("od")?))),
        };
        Ok(SharedModels {
            sut,
            od,
            inpaint,
            tagger,
        })
    }
}

/// Model handles that do not depend on the source image. `None` marks a
/// role served by the per-scene simulator.
#[derive(Clone)]
pub struct SharedModels {
    pub sut: Option<Arc<dyn Captioner>>,
    pub od: Option<Arc<dyn Detector>>,
    pub inpaint: Arc<dyn Inpainter>,
    pub tagger: Arc<dyn Tagger>,
}
