//! Line-delimited JSON artifacts. The first line of every file is a header
//! `{"schema": <name>, "version": <n>}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::distill::{BoundaryDataset, Dialogue, SingleTurnSample};
use crate::env::World;
use crate::error::{invalid_input, Error, Result};
use crate::world::{BenchQuery, Catalog, Song, UserProfile};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct Header {
    schema: String,
    version: u32,
}

pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Header { schema: schema.to_string(), version: SCHEMA_VERSION })?;
    w.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))
}

fn read_lines(path: &Path, schema: &str) -> Result<Vec<String>> {
    let mut lines = open(path)?.lines();
    let head = lines.next().ok_or_else(|| invalid_input(format!("{}: empty file", path.display())))??;
    let header: Header = serde_json::from_str(&head)
        .map_err(|e| invalid_input(format!("{}: bad header: {e}", path.display())))?;
    if header.schema != schema || header.version != SCHEMA_VERSION {
        return Err(invalid_input(format!(
            "{}: expected schema {schema} v{SCHEMA_VERSION}, found {} v{}",
            path.display(),
            header.schema,
            header.version
        )));
    }
    let mut out = Vec::new();
    for l in lines {
        let l = l?;
        if !l.trim().is_empty() {
            out.push(l);
        }
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>> {
    read_lines(path, schema)?
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid_input(format!("{}:{}: {e}", path.display(), i + 2))))
        .collect()
}

pub const WORLD_FILES: [&str; 5] = ["catalog.jsonl", "users.jsonl", "queries_train.jsonl", "queries_eval.jsonl", "queries_probe.jsonl"];

pub fn save_world(dir: &Path, world: &World) -> Result<()> {
    write_jsonl(&dir.join(WORLD_FILES[0]), "catalog", world.catalog.songs())?;
    write_jsonl(&dir.join(WORLD_FILES[1]), "users", &world.users)?;
    write_jsonl(&dir.join(WORLD_FILES[2]), "queries", &world.train_queries)?;
    write_jsonl(&dir.join(WORLD_FILES[3]), "queries", &world.eval_queries)?;
    write_jsonl(&dir.join(WORLD_FILES[4]), "queries", &world.probe_queries)?;
    Ok(())
}

pub fn load_world(dir: &Path) -> Result<World> {
    let songs: Vec<Song> = read_jsonl(&dir.join(WORLD_FILES[0]), "catalog")?;
    let users: Vec<UserProfile> = read_jsonl(&dir.join(WORLD_FILES[1]), "users")?;
    let q = |i: usize| -> Result<Vec<BenchQuery>> { read_jsonl(&dir.join(WORLD_FILES[i]), "queries") };
    Ok(World {
        catalog: Catalog::from_songs(songs)?,
        users,
        train_queries: q(2)?,
        eval_queries: q(3)?,
        probe_queries: q(4)?,
    })
}

/// Stage-1 single turns then stage-2 dialogues, one per line, each tagged
/// with its `stage`.
pub fn write_dataset(path: &Path, ds: &BoundaryDataset) -> Result<()> {
    let mut rows: Vec<serde_json::Value> = Vec::with_capacity(ds.stage1.len() + ds.stage2.len());
    for s in &ds.stage1 {
        rows.push(serde_json::to_value(s)?);
    }
    for d in &ds.stage2 {
        rows.push(serde_json::to_value(d)?);
    }
    write_jsonl(path, "boundary-dataset", &rows)
}

pub fn read_dataset(path: &Path) -> Result<BoundaryDataset> {
    let rows: Vec<serde_json::Value> = read_jsonl(path, "boundary-dataset")?;
    let mut ds = BoundaryDataset::default();
    for (i, row) in rows.into_iter().enumerate() {
        match row.get("stage").and_then(|s| s.as_u64()) {
            Some(1) => ds.stage1.push(serde_json::from_value::<SingleTurnSample>(row)?),
            Some(2) => ds.stage2.push(serde_json::from_value::<Dialogue>(row)?),
            other => return Err(invalid_input(format!("{}: row {} has stage {other:?}", path.display(), i + 1))),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_world, WorldConfig};

    #[test]
    fn world_round_trips() {
        let cfg = WorldConfig { n_train_queries: 50, n_eval_queries: 20, n_probe_queries: 10, ..Default::default() };
        let w = generate_world(3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(dir.path(), &w).unwrap();
        assert_eq!(load_world(dir.path()).unwrap(), w);
        let first = std::fs::read_to_string(dir.path().join("catalog.jsonl")).unwrap();
        assert!(first.starts_with("{\"schema\":\"catalog\",\"version\":1}\n"));
    }

    #[test]
    fn schema_and_missing_files_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, "users", &[1u32, 2]).unwrap();
        assert!(matches!(read_jsonl::<u32>(&p, "catalog"), Err(Error::InvalidInput(_))));
        assert_eq!(read_jsonl::<u32>(&p, "users").unwrap(), vec![1, 2]);
        match read_jsonl::<u32>(&dir.path().join("nope.jsonl"), "users") {
            Err(Error::MissingArtifact(m)) => assert!(m.contains("nope.jsonl")),
            other => panic!("{other:?}"),
        }
    }
}
