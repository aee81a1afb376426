//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "TNRANK01"
//! version  u32      1
//! meta_len u64      length of the JSON metadata block
//! meta     JSON     { config, user_ids, item_ids, item_digest, n_users, n_items, k }
//! factors  f64 × (n_users + n_items) · k, user rows then item rows
//! ```
//!
//! Factors are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::IdMap;
use crate::error::{Error, Result};
use crate::model::LatentFactorModel;
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"TNRANK01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    n_users: usize,
    n_items: usize,
    k: usize,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    item_digest: String,
}

/// A trained model with the configuration and id maps it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LatentFactorModel,
    pub config: TrainConfig,
    pub users: IdMap,
    pub items: IdMap,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let meta = Meta {
            config: self.config,
            n_users: self.model.n_users(),
            n_items: self.model.n_items(),
            k: self.model.k(),
            user_ids: self.users.ids().to_vec(),
            item_ids: self.items.ids().to_vec(),
            item_digest: self.items.digest(),
        };
        let meta = serde_json::to_vec(&meta)?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        for x in self.model.user_factors().iter().chain(self.model.item_factors()) {
            out.write_all(&x.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let bad = |what: &str| Error::BadCheckpoint(what.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let mut long = [0u8; 8];
        input.read_exact(&mut long).map_err(|_| bad("truncated header"))?;
        let meta_len = u64::from_le_bytes(long) as usize;
        let mut meta = Vec::new();
        input
            .by_ref()
            .take(meta_len as u64)
            .read_to_end(&mut meta)
            .map_err(|_| bad("truncated metadata"))?;
        if meta.len() != meta_len {
            return Err(bad("truncated metadata"));
        }
        let meta: Meta =
            serde_json::from_slice(&meta).map_err(|e| Error::BadCheckpoint(format!("metadata: {e}")))?;
        if meta.user_ids.len() != meta.n_users || meta.item_ids.len() != meta.n_items || meta.config.k != meta.k {
            return Err(bad("metadata dimensions disagree"));
        }
        let users = IdMap::from_ids(meta.user_ids)?;
        let items = IdMap::from_ids(meta.item_ids)?;
        if items.digest() != meta.item_digest {
            return Err(bad("item id digest mismatch"));
        }

        let mut read_block = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            input.read_exact(&mut buf).map_err(|_| bad("truncated factors"))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let user_factors = read_block(meta.n_users * meta.k)?;
        let item_factors = read_block(meta.n_items * meta.k)?;
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|_| bad("unreadable trailer"))? != 0 {
            return Err(bad("trailing bytes after factors"));
        }
        let model = LatentFactorModel::from_parts(meta.n_users, meta.n_items, meta.k, user_factors, item_factors)?;
        Ok(Checkpoint {
            model,
            config: meta.config,
            users,
            items,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
