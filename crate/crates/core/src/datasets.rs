//! Interaction log ingestion, leave-one-out splitting and negative sampling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// `user::item::rating::timestamp`
    MovielensDat,
    Tsv,
    Csv,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-dat" | "dat" => Ok(DataFormat::MovielensDat),
            "tsv" => Ok(DataFormat::Tsv),
            "csv" => Ok(DataFormat::Csv),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected movielens-dat, tsv or csv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub clients: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientInteractions {
    /// Training positives, sorted by dense item id.
    items: Vec<usize>,
    /// Timestamps parallel to `items`.
    timestamps: Vec<Option<i64>>,
    test_item: Option<usize>,
}

impl ClientInteractions {
    pub fn train_items(&self) -> &[usize] {
        &self.items
    }

    pub fn test_item(&self) -> Option<usize> {
        self.test_item
    }

    pub fn is_train_positive(&self, item: usize) -> bool {
        self.items.binary_search(&item).is_ok()
    }

    /// Positive in train or held out for test.
    pub fn has_interacted(&self, item: usize) -> bool {
        self.test_item == Some(item) || self.is_train_positive(item)
    }

    /// Items the client never interacted with, ascending.
    pub fn non_interacted(&self, num_items: usize) -> Vec<usize> {
        (0..num_items).filter(|&j| !self.has_interacted(j)).collect()
    }
}

/// Per-client implicit positives with dense id remapping.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    clients: Vec<ClientInteractions>,
}

fn sort_ids(ids: &mut [String]) {
    if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<i64>().unwrap_or_default());
    } else {
        ids.sort();
    }
}

impl InteractionDataset {
    /// Builds a dataset from raw records: deduplicates (user, item) pairs,
    /// binarises every record to a positive and drops users with fewer than
    /// `min_interactions` distinct items.
    pub fn from_raw(records: &[RawInteraction], min_interactions: usize) -> Result<Self> {
        let mut per_user: HashMap<&str, HashMap<&str, Option<i64>>> = HashMap::new();
        for r in records {
            if r.user_id.is_empty() || r.item_id.is_empty() {
                return Err(Error::Input("interaction with empty user or item id".into()));
            }
            let slot = per_user
                .entry(r.user_id.as_str())
                .or_default()
                .entry(r.item_id.as_str())
                .or_insert(r.timestamp);
            // keep the latest timestamp of duplicated rows
            if let (Some(old), Some(new)) = (*slot, r.timestamp) {
                *slot = Some(old.max(new));
            } else if slot.is_none() {
                *slot = r.timestamp;
            }
        }
        per_user.retain(|_, items| items.len() >= min_interactions.max(1));
        if per_user.is_empty() {
            return Err(Error::Config(format!(
                "no users left after filtering with min_interactions={min_interactions}"
            )));
        }

        let mut user_ids: Vec<String> = per_user.keys().map(|s| s.to_string()).collect();
        sort_ids(&mut user_ids);
        let mut item_ids: Vec<String> = per_user
            .values()
            .flat_map(|m| m.keys())
            .map(|s| s.to_string())
            .collect::<std::collections::HashSet<_>>()
            .into_iter()
            .collect();
        sort_ids(&mut item_ids);
        let user_index: HashMap<String, usize> =
            user_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let item_index: HashMap<String, usize> =
            item_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

        let clients = user_ids
            .iter()
            .map(|u| {
                let mut pairs: Vec<(usize, Option<i64>)> = per_user[u.as_str()]
                    .iter()
                    .map(|(item, ts)| (item_index[*item], *ts))
                    .collect();
                pairs.sort_unstable_by_key(|p| p.0);
                ClientInteractions {
                    items: pairs.iter().map(|p| p.0).collect(),
                    timestamps: pairs.iter().map(|p| p.1).collect(),
                    test_item: None,
                }
            })
            .collect();

        Ok(Self {
            user_ids,
            item_ids,
            user_index,
            item_index,
            clients,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn client(&self, c: usize) -> &ClientInteractions {
        &self.clients[c]
    }

    pub fn clients(&self) -> &[ClientInteractions] {
        &self.clients
    }

    pub fn train_items(&self, c: usize) -> &[usize] {
        &self.clients[c].items
    }

    pub fn test_item(&self, c: usize) -> Option<usize> {
        self.clients[c].test_item
    }

    pub fn is_split(&self) -> bool {
        self.clients.iter().all(|c| c.test_item.is_some())
    }

    pub fn num_interactions(&self) -> usize {
        self.clients
            .iter()
            .map(|c| c.items.len() + usize::from(c.test_item.is_some()))
            .sum()
    }

    pub fn dense_user(&self, external: &str) -> Option<usize> {
        self.user_index.get(external).copied()
    }

    pub fn dense_item(&self, external: &str) -> Option<usize> {
        self.item_index.get(external).copied()
    }

    pub fn external_user(&self, dense: usize) -> &str {
        &self.user_ids[dense]
    }

    pub fn external_item(&self, dense: usize) -> &str {
        &self.item_ids[dense]
    }

    pub fn stats(&self) -> DatasetStats {
        let (n, m, k) = (self.num_clients(), self.num_items(), self.num_interactions());
        DatasetStats {
            clients: n,
            items: m,
            interactions: k,
            avg: k as f64 / n as f64,
            sparsity: 1.0 - k as f64 / (n as f64 * m as f64),
        }
    }
}

fn parse_line(
    path: &Path,
    line_no: usize,
    fields: &[&str],
    cols: &Columns,
) -> Result<RawInteraction> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let get = |idx: Option<usize>| idx.and_then(|i| fields.get(i)).map(|s| s.trim());
    let user = get(Some(cols.user)).unwrap_or("");
    let item = get(Some(cols.item)).unwrap_or("");
    if user.is_empty() || item.is_empty() {
        return Err(err(format!(
            "expected at least user and item fields, got {} field(s)",
            fields.len()
        )));
    }
    let rating = match get(cols.rating) {
        Some(s) if !s.is_empty() => Some(
            s.parse::<f64>()
                .map_err(|_| err(format!("invalid rating `{s}`")))?,
        ),
        _ => None,
    };
    let timestamp = match get(cols.timestamp) {
        Some(s) if !s.is_empty() => Some(
            s.parse::<i64>()
                .map_err(|_| err(format!("invalid timestamp `{s}`")))?,
        ),
        _ => None,
    };
    Ok(RawInteraction {
        user_id: user.to_string(),
        item_id: item.to_string(),
        rating,
        timestamp,
    })
}

struct Columns {
    user: usize,
    item: usize,
    rating: Option<usize>,
    timestamp: Option<usize>,
}

/// Reads raw records without filtering.
pub fn read_interactions(path: &Path, format: DataFormat) -> Result<Vec<RawInteraction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::with_capacity(1 << 20, file);
    let mut out = Vec::new();
    let mut columns: Option<Columns> = match format {
        DataFormat::MovielensDat => Some(Columns {
            user: 0,
            item: 1,
            rating: Some(2),
            timestamp: Some(3),
        }),
        _ => None,
    };
    let sep = match format {
        DataFormat::MovielensDat => "::",
        DataFormat::Tsv => "\t",
        DataFormat::Csv => ",",
    };
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        match &columns {
            Some(cols) => {
                if format == DataFormat::MovielensDat && fields.len() > 4 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: format!("expected at most 4 `::` fields, got {}", fields.len()),
                    });
                }
                out.push(parse_line(path, line_no, &fields, cols)?);
            }
            None => {
                let find = |name: &str| fields.iter().position(|f| f.trim() == name);
                let (Some(user), Some(item)) = (find("user"), find("item")) else {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: "header must name `user` and `item` columns".into(),
                    });
                };
                columns = Some(Columns {
                    user,
                    item,
                    rating: find("rating"),
                    timestamp: find("timestamp"),
                });
            }
        }
    }
    Ok(out)
}

/// Reads, deduplicates, binarises and filters an interaction log.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    min_interactions: usize,
) -> Result<InteractionDataset> {
    let records = read_interactions(path, format)?;
    let ds = InteractionDataset::from_raw(&records, min_interactions)?;
    let s = ds.stats();
    log::info!(
        "loaded {}: {} clients, {} items, {} interactions",
        path.display(),
        s.clients,
        s.items,
        s.interactions
    );
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoldoutPolicy {
    /// Latest timestamp; ties go to the larger dense item id. Falls back to
    /// a seeded uniform choice when any timestamp of the client is missing.
    #[default]
    LatestTimestamp,
    Random,
}

/// Moves exactly one positive per client into the test slot.
pub fn leave_one_out_split(
    ds: &InteractionDataset,
    seed: u64,
    policy: HoldoutPolicy,
) -> Result<InteractionDataset> {
    let mut out = ds.clone();
    for (c, client) in out.clients.iter_mut().enumerate() {
        if let Some(t) = client.test_item.take() {
            // re-splitting: restore the held-out item first
            let pos = client.items.partition_point(|&j| j < t);
            client.items.insert(pos, t);
            client.timestamps.insert(pos, None);
        }
        if client.items.len() < 2 {
            return Err(Error::Split(format!(
                "client `{}` has {} positive(s); leave-one-out needs at least 2",
                ds.user_ids[c],
                client.items.len()
            )));
        }
        let all_stamped = client.timestamps.iter().all(Option::is_some);
        let idx = if policy == HoldoutPolicy::LatestTimestamp && all_stamped {
            (0..client.items.len())
                .max_by_key(|&k| (client.timestamps[k], client.items[k]))
                .expect("non-empty")
        } else {
            let mut r = rng::stream(seed, &[purpose::SPLIT, c as u64]);
            r.gen_range(0..client.items.len())
        };
        client.test_item = Some(client.items.remove(idx));
        client.timestamps.remove(idx);
    }
    Ok(out)
}

/// One labelled training example: `(item, label)` with label 1 for positives.
pub type Example = (usize, u8);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub examples: Vec<Example>,
    /// Set when negatives had to be drawn with replacement or could not be
    /// drawn at all.
    pub replacement_warning: bool,
}

impl TrainingBatch {
    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.1 == 1).count()
    }
}

/// Draws training negatives from the items a client never interacted with.
#[derive(Debug, Clone)]
pub struct NegativeSampler<'a> {
    dataset: &'a InteractionDataset,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(dataset: &'a InteractionDataset, negatives_per_positive: usize, seed: u64) -> Self {
        Self {
            dataset,
            negatives_per_positive,
            seed,
        }
    }

    /// Samples a batch for `client`. `stream` distinguishes independent draws
    /// for the same client (e.g. round and local iteration).
    pub fn sample_training_batch(
        &self,
        client: usize,
        batch_size: usize,
        stream: &[u64],
    ) -> TrainingBatch {
        let mut keys = vec![purpose::TRAIN_BATCH, client as u64];
        keys.extend_from_slice(stream);
        let mut r = rng::stream(self.seed, &keys);
        let data = self.dataset.client(client);
        let k = self.negatives_per_positive;

        let mut positives = data.train_items().to_vec();
        let max_pos = (batch_size / (1 + k)).max(1);
        if positives.len() > max_pos {
            positives.shuffle(&mut r);
            positives.truncate(max_pos);
            positives.sort_unstable();
        }

        let universe = data.non_interacted(self.dataset.num_items());
        let needed = positives.len() * k;
        let mut warning = false;
        let negatives: Vec<usize> = if needed == 0 {
            Vec::new()
        } else if universe.is_empty() {
            log::warn!("client {client}: no item available as a negative");
            warning = true;
            Vec::new()
        } else if universe.len() < needed {
            log::warn!(
                "client {client}: {} candidate negatives for {needed} draws; sampling with replacement",
                universe.len()
            );
            warning = true;
            (0..needed)
                .map(|_| universe[r.gen_range(0..universe.len())])
                .collect()
        } else {
            index::sample(&mut r, universe.len(), needed)
                .into_iter()
                .map(|i| universe[i])
                .collect()
        };

        let mut examples = Vec::with_capacity(positives.len() + negatives.len());
        for (p, &item) in positives.iter().enumerate() {
            examples.push((item, 1));
            if !negatives.is_empty() {
                for &n in &negatives[p * k..(p + 1) * k] {
                    examples.push((n, 0));
                }
            }
        }
        examples.truncate(batch_size.max(1 + k));
        TrainingBatch {
            examples,
            replacement_warning: warning,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCandidates {
    /// Test item first, followed by the sampled negatives.
    pub items: Vec<usize>,
    pub replacement_warning: bool,
}

/// Test item plus `num_negatives` items the client never interacted with.
pub fn build_eval_candidates(
    ds: &InteractionDataset,
    client: usize,
    num_negatives: usize,
    seed: u64,
) -> Result<EvalCandidates> {
    let data = ds.client(client);
    let test = data.test_item().ok_or_else(|| {
        Error::Protocol(format!(
            "client `{}` has no held-out item; split the dataset first",
            ds.external_user(client)
        ))
    })?;
    let universe = data.non_interacted(ds.num_items());
    let mut r = rng::stream(seed, &[purpose::EVAL_CANDIDATES, client as u64]);
    let mut items = Vec::with_capacity(num_negatives + 1);
    items.push(test);
    let mut warning = false;
    if num_negatives > universe.len() {
        warning = true;
        log::warn!(
            "client {client}: only {} non-interacted items for {num_negatives} eval negatives",
            universe.len()
        );
        if !universe.is_empty() {
            items.extend((0..num_negatives).map(|_| universe[r.gen_range(0..universe.len())]));
        }
    } else {
        items.extend(
            index::sample(&mut r, universe.len(), num_negatives)
                .into_iter()
                .map(|i| universe[i]),
        );
    }
    Ok(EvalCandidates {
        items,
        replacement_warning: warning,
    })
}
