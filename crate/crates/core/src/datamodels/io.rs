//! Suite directories: `config.json`, `phase1.bin`, and one
//! `bucket_<pattern>.bin` per fitted bucket.
//!
//! A `.bin` file starts with three little-endian u64s (N_tr, K, dev count);
//! each dev example then contributes N_tr * K row-major f64 weights followed
//! by its bias, all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pattern_key, Bucket, Datamodel, DatamodelSuite, LabelPattern, SuiteConfig};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct BucketEntry {
    pattern: LabelPattern,
    n_records: usize,
    /// Absent when the bucket uses phase 1.
    file: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SuiteFile {
    #[serde(flatten)]
    config: SuiteConfig,
    n_train: usize,
    k: usize,
    dev_count: usize,
    buckets: Vec<BucketEntry>,
}

fn encode(models: &[Datamodel], n: usize, k: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + models.len() * (n * k + 1) * 8);
    for h in [n, k, models.len()] {
        out.extend_from_slice(&(h as u64).to_le_bytes());
    }
    for m in models {
        for w in &m.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&m.bias.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8], path: &Path, bucket: Option<&LabelPattern>) -> Result<(usize, usize, Vec<Datamodel>)> {
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: msg.to_string(),
    };
    if bytes.len() < 24 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes")) as usize;
    let (n, k, devs) = (word(0), word(1), word(2));
    let per = n
        .checked_mul(k)
        .and_then(|x| x.checked_add(1))
        .ok_or_else(|| bad("header overflow"))?;
    if bytes.len() != 24 + devs * per * 8 {
        return Err(bad(&format!("expected {} bytes for {n} x {k} x {devs}", 24 + devs * per * 8)));
    }
    let floats: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let models = floats
        .chunks_exact(per)
        .enumerate()
        .map(|(d, c)| Datamodel {
            n_train: n,
            k,
            weights: c[..n * k].to_vec(),
            bias: c[n * k],
            dev_id: d,
            bucket: bucket.cloned(),
        })
        .collect();
    Ok((n, k, models))
}

pub fn save_suite(suite: &DatamodelSuite, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("phase1.bin", &encode(&suite.phase1, suite.n_train, suite.k))?;
    let mut buckets = Vec::new();
    for (pattern, b) in &suite.phase2 {
        let file = match &b.models {
            Some(models) => {
                let name = format!("bucket_{}.bin", pattern_key(pattern));
                write(&name, &encode(models, suite.n_train, suite.k))?;
                Some(name)
            }
            None => None,
        };
        buckets.push(BucketEntry {
            pattern: pattern.clone(),
            n_records: b.n_records,
            file,
        });
    }
    let cfg = SuiteFile {
        config: suite.config,
        n_train: suite.n_train,
        k: suite.k,
        dev_count: suite.dev_count(),
        buckets,
    };
    write("config.json", serde_json::to_string_pretty(&cfg)?.as_bytes())
}

pub fn load_suite(dir: &Path) -> Result<DatamodelSuite> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let cfg: SuiteFile = serde_json::from_slice(&read("config.json")?)?;
    let check = |n: usize, k: usize, models: &[Datamodel], name: &str| {
        if (n, k, models.len()) != (cfg.n_train, cfg.k, cfg.dev_count) {
            return Err(Error::Parse {
                path: dir.join(name),
                line: 0,
                message: "header disagrees with config.json".into(),
            });
        }
        Ok(())
    };
    let (n, k, phase1) = decode(&read("phase1.bin")?, &dir.join("phase1.bin"), None)?;
    check(n, k, &phase1, "phase1.bin")?;
    let mut phase2 = BTreeMap::new();
    for b in cfg.buckets.iter() {
        let models = match &b.file {
            Some(name) => {
                let (n, k, models) = decode(&read(name)?, &dir.join(name), Some(&b.pattern))?;
                check(n, k, &models, name)?;
                Some(models)
            }
            None => None,
        };
        phase2.insert(
            b.pattern.clone(),
            Bucket {
                n_records: b.n_records,
                models,
            },
        );
    }
    Ok(DatamodelSuite {
        config: cfg.config,
        n_train: cfg.n_train,
        k: cfg.k,
        phase1,
        phase2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodels::fit_suite;
    use crate::testutil::oracle_pool;

    #[test]
    fn roundtrip_is_exact() {
        let (pool, _) = oracle_pool(10, 2, 400, 0.2, 6);
        let suite = fit_suite(&pool, SuiteConfig { lambda: 1e-4, bucket_threshold: 100 }).unwrap();
        assert!(suite.phase2.values().any(|b| b.models.is_some()));
        assert!(suite.phase2.values().any(|b| b.models.is_none()));
        let dir = tempfile::tempdir().unwrap();
        save_suite(&suite, dir.path()).unwrap();
        assert_eq!(load_suite(dir.path()).unwrap(), suite);
    }

    #[test]
    fn header_layout() {
        let mut m = Datamodel::zeros(2, 1, 0);
        m.weights = vec![1.5, -2.0];
        m.bias = 0.25;
        let b = encode(&[m], 2, 1);
        assert_eq!(b.len(), 24 + 3 * 8);
        assert_eq!(&b[0..8], &2u64.to_le_bytes());
        assert_eq!(&b[8..16], &1u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.5f64.to_le_bytes());
        assert_eq!(&b[40..48], &0.25f64.to_le_bytes());
    }

    #[test]
    fn truncated_file_rejected() {
        let b = encode(&[Datamodel::zeros(3, 2, 0)], 3, 2);
        assert!(decode(&b[..b.len() - 1], Path::new("x.bin"), None).is_err());
    }
}
