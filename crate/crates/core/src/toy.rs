//! Synthetic interactions with planted user-block × item-block preferences,
//! small enough to train in seconds and used by every offline test.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{InteractionDataset, RawInteraction};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub clients: usize,
    pub items: usize,
    /// Number of blocks; user block `b` prefers item block `b`.
    pub blocks: usize,
    /// In-block positives per client.
    pub positives: usize,
    /// Out-of-block positives per client.
    pub noise: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            clients: 20,
            items: 80,
            blocks: 4,
            positives: 12,
            noise: 1,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.clients < self.blocks || self.items < self.blocks {
            return Err(Error::Config("toy: need at least one client and item per block".into()));
        }
        let per_block = self.items / self.blocks;
        if self.positives == 0 || self.positives > per_block {
            return Err(Error::Config(format!(
                "toy: positives must lie in [1, {per_block}] (items per block)"
            )));
        }
        if self.noise > self.items - per_block {
            return Err(Error::Config("toy: too many out-of-block positives".into()));
        }
        Ok(())
    }

    pub fn user_block(&self, client: usize) -> usize {
        client * self.blocks / self.clients
    }

    pub fn item_block(&self, item: usize) -> usize {
        (item * self.blocks / self.items).min(self.blocks - 1)
    }
}

/// Raw interactions with random timestamps. Users and items use integer ids.
pub fn generate_toy(spec: &ToySpec) -> Result<Vec<RawInteraction>> {
    spec.validate()?;
    let mut out = Vec::new();
    for u in 0..spec.clients {
        let mut r = rng::stream(spec.seed, &[purpose::TOY, u as u64]);
        let b = spec.user_block(u);
        let (inside, outside): (Vec<usize>, Vec<usize>) = (0..spec.items).partition(|&j| spec.item_block(j) == b);
        let mut chosen: Vec<usize> = index::sample(&mut r, inside.len(), spec.positives)
            .into_iter()
            .map(|k| inside[k])
            .collect();
        chosen.extend(
            index::sample(&mut r, outside.len(), spec.noise)
                .into_iter()
                .map(|k| outside[k]),
        );
        chosen.shuffle(&mut r);
        let base: i64 = r.gen_range(0..1_000);
        for (t, item) in chosen.into_iter().enumerate() {
            out.push(RawInteraction {
                user_id: u.to_string(),
                item_id: item.to_string(),
                rating: Some(1.0),
                timestamp: Some(base + t as i64),
            });
        }
    }
    Ok(out)
}

/// Toy dataset before the train/test split.
pub fn toy_dataset(spec: &ToySpec) -> Result<InteractionDataset> {
    InteractionDataset::from_raw(&generate_toy(spec)?, 1)
}

/// Writes interactions as a `user,item,rating,timestamp` CSV.
pub fn write_csv(path: &Path, records: &[RawInteraction]) -> Result<()> {
    let mut s = String::from("user,item,rating,timestamp\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.user_id,
            r.item_id,
            r.rating.map(|x| x.to_string()).unwrap_or_default(),
            r.timestamp.map(|x| x.to_string()).unwrap_or_default()
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
