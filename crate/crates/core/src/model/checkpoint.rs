//! Binary checkpoint container: `F3CK` magic, little-endian `u32` header
//! length, a JSON header describing the blocks, then the raw little-endian
//! floats of every block in header order.
//!
//! The same container is used for upload payloads so the bytes that leave a
//! client can be inspected block by block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClientState, Mlp, TransferNet};
use crate::numerics::{DenseMatrix, DenseVector, Real};

const MAGIC: &[u8; 4] = b"F3CK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub seed: u64,
    pub round: u64,
    pub client_id: Option<usize>,
    /// Extra integers needed to rebuild the state (e.g. local step counter).
    #[serde(default)]
    pub steps: u64,
    pub blocks: Vec<BlockHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(seed: u64, round: u64, client_id: Option<usize>) -> Self {
        Self {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                dtype: T::DTYPE.to_string(),
                seed,
                round,
                client_id,
                steps: 0,
                blocks: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[T]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.header.blocks.push(BlockHeader {
            name: name.into(),
            shape,
        });
        self.data.push(values.to_vec());
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &DenseMatrix<T>) {
        self.push(name, vec![m.rows(), m.cols()], m.data());
    }

    pub fn push_mlp(&mut self, prefix: &str, net: &Mlp<T>) {
        for (name, shape, values) in net.blocks() {
            self.push(format!("{prefix}.{name}"), shape, values);
        }
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.header.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn block(&self, name: &str) -> Option<(&[usize], &[T])> {
        self.header
            .blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| (&self.header.blocks[i].shape[..], &self.data[i][..]))
    }

    pub fn matrix(&self, name: &str) -> Result<DenseMatrix<T>> {
        let (shape, values) = self
            .block(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
        match shape {
            [r, c] => DenseMatrix::new(*r, *c, values.to_vec()),
            _ => Err(Error::Checkpoint(format!("block `{name}` is not 2-D"))),
        }
    }

    /// Rebuilds an MLP shaped like `template` from blocks under `prefix`.
    pub fn mlp_like(&self, prefix: &str, template: &Mlp<T>) -> Result<Mlp<T>> {
        let mut out = template.clone();
        for (k, layer) in out.layers_mut().iter_mut().enumerate() {
            let w = self.matrix(&format!("{prefix}.layer{k}.weight"))?;
            if w.shape() != layer.weight.shape() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}.layer{k}.weight has shape {:?}, expected {:?}",
                    w.shape(),
                    layer.weight.shape()
                )));
            }
            layer.weight = w;
            let (_, b) = self
                .block(&format!("{prefix}.layer{k}.bias"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.layer{k}.bias")))?;
            if b.len() != layer.bias.len() {
                return Err(Error::Checkpoint(format!("{prefix}.layer{k}.bias has wrong length")));
            }
            layer.bias.copy_from_slice(b);
        }
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.data.iter().map(Vec::len).sum::<usize>() * T::BYTES;
        let mut out = Vec::with_capacity(8 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for block in &self.data {
            for &x in block {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = decode_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, reader expects {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let mut off = 8 + hlen;
        let mut data = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            let n: usize = b.shape.iter().product();
            let end = off + n * T::BYTES;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated block `{}`", b.name)));
            }
            data.push(bytes[off..end].chunks_exact(T::BYTES).map(T::read_le).collect());
            off = end;
        }
        if off != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - off)));
        }
        Ok(Self { header, data })
    }
}

/// Reads only the JSON header of an encoded checkpoint.
pub fn decode_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    Ok(header)
}

pub const USER_BLOCK: &str = "user_embedding";
pub const GLOBAL_BLOCK: &str = "global_table";
pub const PERSONAL_BLOCK: &str = "personal_table";
pub const TRANSFER_PREFIX: &str = "transfer";
pub const ROW_TRANSFER_PREFIX: &str = "row_transfer";

impl<T: Real> ClientState<T> {
    pub fn to_checkpoint(&self, seed: u64, round: u64) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(seed, round, Some(self.client_id));
        ck.header.steps = self.steps;
        ck.push(USER_BLOCK, vec![self.user_embedding.dim()], &self.user_embedding);
        ck.push_matrix(GLOBAL_BLOCK, &self.global_table);
        ck.push_matrix(PERSONAL_BLOCK, &self.personal_table);
        ck.push_mlp(TRANSFER_PREFIX, self.transfer.mlp());
        if let Some(net) = &self.row_transfer {
            ck.push_mlp(ROW_TRANSFER_PREFIX, net);
        }
        ck
    }

    /// Restores a state saved by [`ClientState::to_checkpoint`]. `template`
    /// provides the network architectures.
    pub fn from_checkpoint(ck: &Checkpoint<T>, template: &ClientState<T>) -> Result<Self> {
        let (_, user) = ck
            .block(USER_BLOCK)
            .ok_or_else(|| Error::Checkpoint("missing user_embedding".into()))?;
        let transfer = TransferNet::from_mlp(
            template.transfer.dim(),
            ck.mlp_like(TRANSFER_PREFIX, template.transfer.mlp())?,
        )?;
        let row_transfer = match &template.row_transfer {
            Some(t) => Some(ck.mlp_like(ROW_TRANSFER_PREFIX, t)?),
            None => None,
        };
        Ok(ClientState {
            client_id: ck.header.client_id.unwrap_or(template.client_id),
            user_embedding: DenseVector::from_vec(user.to_vec()),
            global_table: ck.matrix(GLOBAL_BLOCK)?,
            personal_table: ck.matrix(PERSONAL_BLOCK)?,
            transfer,
            row_transfer,
            steps: ck.header.steps,
        })
    }
}
