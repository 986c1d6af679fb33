//! Pipeline configuration, read from TOML. Every key has a default, so an
//! empty file (or no file) gives the desk-scale setup.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use cfparse_core::cflearn::{CfObjective, OslSchedule};
use cfparse_core::corpus::{parse_lexicon, parse_templates, ExpressionTagPair, Template, DEFAULT_LEXICON, DEFAULT_TEMPLATES};
use cfparse_core::experiment::{ExperimentConfig, SystemSpec};
use cfparse_core::feedback::Descriptions;
use cfparse_core::geo::GeoDatabase;
use cfparse_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Input files; anything left unset uses the bundled data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub lexicon: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    /// Objects and areas go together.
    pub objects: Option<PathBuf>,
    pub areas: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub addr: String,
    pub reserve_timeout_secs: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            addr: "127.0.0.1:8080".into(),
            reserve_timeout_secs: 600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of all artifacts; relative paths resolve against the config file.
    pub workdir: PathBuf,
    pub seeds: Vec<u64>,
    pub corpus_size: usize,
    pub split_divisor: usize,
    pub log_beam: usize,
    /// System trained by a plain `train-cf`.
    pub objective: CfObjective,
    pub schedule: OslSchedule,
    /// Systems trained by `train-cf --all`, `pipeline` and `experiment`.
    pub systems: Vec<SystemSpec>,
    pub minibatch_log_size: usize,
    pub ar_iterations: usize,
    pub ar_seed: u64,
    pub data: DataPaths,
    pub service: ServiceConfig,
    pub supervised: TrainConfig,
    pub counterfactual: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        PipelineConfig {
            workdir: PathBuf::from("run"),
            seeds: e.seeds,
            corpus_size: e.corpus_size,
            split_divisor: e.split_divisor,
            log_beam: e.log_beam,
            objective: CfObjective::DpmTOsl,
            schedule: OslSchedule::EveryValidation,
            systems: e.systems,
            minibatch_log_size: e.minibatch_log_size,
            ar_iterations: e.ar_iterations,
            ar_seed: e.ar_seed,
            data: DataPaths::default(),
            service: ServiceConfig::default(),
            supervised: e.supervised,
            counterfactual: e.counterfactual,
        }
    }
}

impl PipelineConfig {
    /// Parses and validates; relative paths are made relative to `base`.
    /// Keys missing from a section keep the values of the default pipeline,
    /// not those of the section's type.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        let over: toml::Table = toml::from_str(text).map_err(|e| cfg(&e))?;
        let mut merged = toml::Table::try_from(PipelineConfig::default()).map_err(|e| cfg(&e))?;
        merge(&mut merged, over);
        let mut c: PipelineConfig = merged.try_into().map_err(|e| cfg(&e))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut c.workdir);
        for p in [
            &mut c.data.lexicon,
            &mut c.data.templates,
            &mut c.data.objects,
            &mut c.data.areas,
            &mut c.data.descriptions,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seeds: self.seeds.clone(),
            corpus_size: self.corpus_size,
            split_divisor: self.split_divisor,
            supervised: self.supervised,
            counterfactual: self.counterfactual,
            log_beam: self.log_beam,
            systems: self.systems.clone(),
            minibatch_log_size: self.minibatch_log_size,
            ar_iterations: self.ar_iterations,
            ar_seed: self.ar_seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment().validate().map_err(|e| CliError::Config(e.to_string()))?;
        check_schedule(self.objective, self.schedule)?;
        if self.data.objects.is_some() != self.data.areas.is_some() {
            return Err(CliError::Config("data.objects and data.areas must be given together".into()));
        }
        self.addr()?;
        if !(self.service.reserve_timeout_secs > 0.0) {
            return Err(CliError::Config("service.reserve_timeout_secs must be positive".into()));
        }
        if self.ar_iterations == 0 {
            return Err(CliError::Config("ar_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn addr(&self) -> Result<SocketAddr, CliError> {
        self.service
            .addr
            .parse()
            .map_err(|e| CliError::Config(format!("service.addr `{}`: {e}", self.service.addr)))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.workdir.join(format!("seed-{seed}"))
    }

    pub fn lexicon(&self) -> Result<Vec<ExpressionTagPair>, CliError> {
        let text = read_or(&self.data.lexicon, DEFAULT_LEXICON)?;
        parse_lexicon(&text).map_err(|e| CliError::Data(e.to_string()))
    }

    pub fn templates(&self) -> Result<Vec<Template>, CliError> {
        let text = read_or(&self.data.templates, DEFAULT_TEMPLATES)?;
        parse_templates(&text).map_err(|e| CliError::Data(e.to_string()))
    }

    pub fn db(&self) -> Result<GeoDatabase, CliError> {
        match (&self.data.objects, &self.data.areas) {
            (Some(o), Some(a)) => GeoDatabase::load(o, a).map_err(|e| CliError::Data(e.to_string())),
            _ => Ok(GeoDatabase::bundled()),
        }
    }

    pub fn descriptions(&self) -> Result<Descriptions, CliError> {
        match &self.data.descriptions {
            Some(p) => Descriptions::read(p).map_err(|e| CliError::Data(e.to_string())),
            None => Ok(Descriptions::bundled()),
        }
    }
}

/// OSL objectives need a refresh schedule; the others ignore it.
pub fn check_schedule(objective: CfObjective, schedule: OslSchedule) -> Result<(), CliError> {
    if objective.uses_osl() && schedule == OslSchedule::Never {
        return Err(CliError::Config(format!("{objective} needs an OSL schedule other than `never`")));
    }
    Ok(())
}

/// Tables merge key by key; anything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_or(path: &Option<PathBuf>, bundled: &str) -> Result<String, CliError> {
    match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e)),
        None => Ok(bundled.to_string()),
    }
}
