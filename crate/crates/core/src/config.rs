//! TOML configuration files with dotted `KEY=VALUE` overrides.
//!
//! The file is merged onto the serialized defaults, so partial tables keep
//! the defaults of their siblings. Overrides are applied in order on top of
//! the file, so the last one wins.
//! Values are parsed as TOML (`0.5`, `true`, `"text"`, `[1, 2]`); anything
//! that does not parse is taken as a bare string.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override {0:?} is not of the form KEY=VALUE")]
    BadOverride(String),
    #[error("override key {key:?}: {segment:?} is not a table")]
    NotATable { key: String, segment: String },
    #[error("serializing defaults: {0}")]
    Defaults(#[from] toml::ser::Error),
}

pub fn read_table(path: Option<&Path>) -> Result<Table, LoadError> {
    match path {
        None => Ok(Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| LoadError::Io {
                path: p.display().to_string(),
                source,
            })?;
            Ok(text.parse::<Table>()?)
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| Value::String(raw.to_owned())),
        Err(_) => Value::String(raw.to_owned()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), LoadError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LoadError::BadOverride(assignment.to_owned()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(LoadError::BadOverride(assignment.to_owned()));
    }
    let mut segments: Vec<&str> = key.split('.').collect();
    let leaf = segments.pop().expect("split yields at least one segment");
    let mut cursor = table;
    for seg in segments {
        let entry = cursor
            .entry(seg.to_owned())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(LoadError::NotATable {
                    key: key.to_owned(),
                    segment: seg.to_owned(),
                })
            }
        };
    }
    cursor.insert(leaf.to_owned(), parse_value(raw.trim()));
    Ok(())
}

/// Recursively copies `top` into `base`; tables merge, everything else
/// replaces.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Starts from `T::default()`, merges the file at `path`, applies
/// `overrides`, and deserializes.
pub fn load<T>(path: Option<&Path>, overrides: &[String]) -> Result<T, LoadError>
where
    T: DeserializeOwned + Serialize + Default,
{
    let mut table = Table::try_from(T::default())?;
    merge(&mut table, read_table(path)?);
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(T::deserialize(table)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainerConfig;

    #[test]
    fn empty_config_is_default() {
        let c: TrainerConfig = load(None, &[]).unwrap();
        assert_eq!(c, TrainerConfig::default());
    }

    #[test]
    fn overrides_last_wins_and_nest() {
        let overrides = vec![
            "seed=3".to_owned(),
            "world.n_bins=6".to_owned(),
            "solver_params.gamma=0.5".to_owned(),
            "seed=9".to_owned(),
            "solver_reward=discrete".to_owned(),
        ];
        let c: TrainerConfig = load(None, &overrides).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.world.n_bins, 6);
        assert_eq!(c.solver_params.gamma, 0.5);
        assert_eq!(c.solver_reward, crate::reward::SolverRewardKind::Discrete);
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "steps = 10\n[kl_solver]\nbeta = 0.1\n[kl_proposer]\nbeta_max = 5.0\n",
        )
        .unwrap();
        let c: TrainerConfig = load(Some(&p), &["kl_solver.eta=0.3".to_owned()]).unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.kl_solver.eta, 0.3);
        assert_eq!(c.kl_solver.beta, 0.1);
        assert_eq!(
            c.kl_solver.target,
            TrainerConfig::default().kl_solver.target
        );
        assert_eq!(c.kl_proposer.beta_max, 5.0);
        assert_eq!(
            c.kl_proposer.target,
            TrainerConfig::default().kl_proposer.target
        );
    }

    #[test]
    fn unknown_keys_and_bad_overrides_rejected() {
        assert!(load::<TrainerConfig>(None, &["nonsense=1".to_owned()]).is_err());
        assert!(matches!(
            load::<TrainerConfig>(None, &["novalue".to_owned()]),
            Err(LoadError::BadOverride(_))
        ));
        assert!(matches!(
            load::<TrainerConfig>(None, &["steps=1".to_owned(), "steps.x=2".to_owned()]),
            Err(LoadError::NotATable { .. })
        ));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let c = TrainerConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: TrainerConfig = text.parse::<Table>().unwrap().try_into().unwrap();
        assert_eq!(back, c);
    }
}
