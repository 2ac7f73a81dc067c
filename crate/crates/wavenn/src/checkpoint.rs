//! Checkpoint persistence.
//!
//! A checkpoint is a single binary file: an 8-byte magic, a format version,
//! the network config as embedded TOML, the epoch and optimizer step
//! counters, the metric history, and one length-prefixed record per
//! parameter tensor (name, shape, values, then the Adam first and second
//! moments of the same length). All integers and floats are little-endian;
//! floats are raw 64-bit, so a save → load → save cycle is byte-identical.
//! A human-readable JSON sidecar with everything except the big arrays is
//! written next to it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Network, NetworkConfig};
use crate::metrics::MetricsRow;
use crate::optim::Adam;

const MAGIC: &[u8; 8] = b"WAVENNCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    /// Completed epochs in the run this checkpoint belongs to.
    pub epoch: usize,
    pub adam_t: u64,
    pub history: Vec<MetricsRow>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    /// Snapshot a network and its optimizer state.
    pub fn capture(network: &Network, adam: &Adam, epoch: usize, history: &[MetricsRow]) -> Checkpoint {
        let entries = network.param_entries();
        let shapes = network.param_shapes();
        let params = entries
            .into_iter()
            .zip(shapes)
            .zip(adam.first_moments().iter().zip(adam.second_moments()))
            .map(|(((name, values), shape), (m, v))| ParamRecord {
                name,
                shape,
                values: values.to_vec(),
                m: m.clone(),
                v: v.clone(),
            })
            .collect();
        Checkpoint {
            config: network.config().clone(),
            epoch,
            adam_t: adam.t(),
            history: history.to_vec(),
            params,
        }
    }

    /// Rebuild the network and optimizer. Parameters are matched by name;
    /// anything unknown, missing, or mis-sized is a checkpoint error.
    pub fn restore(&self) -> Result<(Network, Adam)> {
        let mut network = Network::zeroed(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;
        let mut entries = network.param_entries_mut();
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} parameter tensors but the file stores {}",
                entries.len(),
                self.params.len()
            )));
        }
        let mut m = vec![Vec::new(); entries.len()];
        let mut v = vec![Vec::new(); entries.len()];
        let mut filled = vec![false; entries.len()];
        for record in &self.params {
            let slot = entries
                .iter()
                .position(|(name, _)| *name == record.name)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("unknown parameter name '{}'", record.name))
                })?;
            if filled[slot] {
                return Err(Error::Checkpoint(format!(
                    "duplicate parameter name '{}'",
                    record.name
                )));
            }
            let (_, target) = &mut entries[slot];
            if target.len() != record.values.len()
                || record.m.len() != record.values.len()
                || record.v.len() != record.values.len()
            {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' should have {} values, file stores {} (m: {}, v: {})",
                    record.name,
                    target.len(),
                    record.values.len(),
                    record.m.len(),
                    record.v.len()
                )));
            }
            target.copy_from_slice(&record.values);
            m[slot] = record.m.clone();
            v[slot] = record.v.clone();
            filled[slot] = true;
        }
        drop(entries);
        let adam = Adam::from_state(m, v, self.adam_t)
            .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
        Ok((network, adam))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

        let sidecar = serde_json::json!({
            "format_version": VERSION,
            "epoch": self.epoch,
            "adam_steps": self.adam_t,
            "parameter_tensors": self.params.len(),
            "parameter_total": self.params.iter().map(|p| p.values.len()).sum::<usize>(),
            "config": self.config,
            "history": self.history,
        });
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Checkpoint(format!("sidecar encoding failed: {e}")))?;
        let sidecar_path = path.with_extension("json");
        std::fs::write(&sidecar_path, text + "\n").map_err(|e| Error::io(&sidecar_path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let config = toml::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config encoding failed: {e}")))?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());

        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());

        out.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for row in &self.history {
            out.extend_from_slice(&row.run.to_le_bytes());
            out.extend_from_slice(&row.epoch.to_le_bytes());
            for v in [row.train_loss, row.train_acc, row.test_acc, row.lr, row.seconds] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(p.values.len() as u64).to_le_bytes());
            for series in [&p.values, &p.m, &p.v] {
                for v in series.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }

        let config_len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|e| Error::Checkpoint(format!("embedded config is not UTF-8: {e}")))?;
        let config: NetworkConfig = toml::from_str(config_text)
            .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;

        let epoch = r.u64()? as usize;
        let adam_t = r.u64()?;

        let rows = r.u32()? as usize;
        let mut history = Vec::with_capacity(rows.min(1 << 20));
        for _ in 0..rows {
            let run = r.u32()?;
            let epoch = r.u32()?;
            let f = r.f64_vec(5)?;
            history.push(MetricsRow {
                run,
                epoch,
                train_loss: f[0],
                train_acc: f[1],
                test_acc: f[2],
                lr: f[3],
                seconds: f[4],
            });
        }

        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(1 << 20));
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count = r.u64()? as usize;
            let values = r.f64_vec(count)?;
            let m = r.f64_vec(count)?;
            let v = r.f64_vec(count)?;
            params.push(ParamRecord {
                name,
                shape,
                values,
                m,
                v,
            });
        }

        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            epoch,
            adam_t,
            history,
            params,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| {
            Error::Checkpoint(format!("corrupt length at offset {}", self.pos))
        })?;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint(format!("corrupt length at offset {}", self.pos))
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_state() -> (Network, Adam) {
        let config = NetworkConfig {
            paths: 2,
            levels: 2,
            fc_widths: vec![4],
            classes: 3,
            input_height: 6,
            input_width: 6,
            input_channels: 1,
            dropout_keep: 0.9,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::init(config, &mut rng).unwrap();
        let shapes: Vec<usize> = net.param_entries().iter().map(|(_, v)| v.len()).collect();
        let mut adam = Adam::new(&shapes);
        // Push the moments away from zero so the round trip is non-trivial.
        let grads: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut net2 = net.clone();
        let mut entries = net2.param_entries_mut();
        let mut views: Vec<&mut [f64]> = entries.iter_mut().map(|(_, s)| &mut **s).collect();
        let gviews: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        adam.step(0.01, &mut views, &gviews).unwrap();
        drop(views);
        drop(entries);
        (net2, adam)
    }

    fn rows() -> Vec<MetricsRow> {
        vec![
            MetricsRow { run: 0, epoch: 0, train_loss: 1.1, train_acc: 0.5, test_acc: 0.52, lr: 0.01, seconds: 2.5 },
            MetricsRow { run: 0, epoch: 1, train_loss: 0.7, train_acc: 0.8, test_acc: 0.79, lr: 0.0095, seconds: 2.4 },
        ]
    }

    #[test]
    fn save_load_restore_is_lossless_and_byte_stable() {
        let (net, adam) = small_state();
        let ckpt = Checkpoint::capture(&net, &adam, 2, &rows());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let again = dir.path().join("again.ckpt");
        loaded.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

        let (net2, adam2) = loaded.restore().unwrap();
        for ((n1, v1), (n2, v2)) in net.param_entries().iter().zip(net2.param_entries().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
        assert_eq!(adam2.t(), adam.t());
        assert_eq!(adam2.first_moments(), adam.first_moments());
        assert_eq!(adam2.second_moments(), adam.second_moments());

        let sidecar = std::fs::read_to_string(path.with_extension("json")).unwrap();
        let json: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(json["epoch"], 2);
        assert_eq!(json["history"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn corrupted_files_are_rejected_without_partial_state() {
        let (net, adam) = small_state();
        let ckpt = Checkpoint::capture(&net, &adam, 1, &rows());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        ckpt.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let truncated = &good[..good.len() - 10];
        let err = Checkpoint::from_bytes(truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = Checkpoint::from_bytes(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_version = good.clone();
        bad_version[8] = 99;
        let err = Checkpoint::from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");

        let mut trailing = good.clone();
        trailing.push(0);
        let err = Checkpoint::from_bytes(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn unknown_parameter_names_fail_restore() {
        let (net, adam) = small_state();
        let mut ckpt = Checkpoint::capture(&net, &adam, 1, &[]);
        ckpt.params[0].name = "bogus.tensor".into();
        let err = ckpt.restore().unwrap_err();
        assert!(err.to_string().contains("unknown parameter name"), "{err}");

        let mut ckpt = Checkpoint::capture(&net, &adam, 1, &[]);
        ckpt.params.pop();
        assert!(ckpt.restore().is_err());

        let mut ckpt = Checkpoint::capture(&net, &adam, 1, &[]);
        ckpt.params[2].values.push(0.0);
        assert!(ckpt.restore().is_err());
    }
}
