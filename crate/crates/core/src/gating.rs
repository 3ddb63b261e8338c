//! Thresholding popup scores into binary gates, selecting the gated weights,
//! and the bit-packed gate file.
//!
//! Gate file layout (little-endian):
//!
//! ```text
//! "TSSG" | u16 version = 1 | u32 task_id | u16 tensor_count
//! tensor_count × (u32 rows, u32 cols)
//! bit payload: all tensors concatenated, row-major, LSB-first in each byte,
//!              ceil(total_gates / 8) bytes, unused tail bits zero
//! u32 CRC-32 of the bit payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Result, TssError};
use crate::model::ScoreSet;
use crate::tensor::{self, BinaryOp, Matrix};

pub const GATE_MAGIC: &[u8; 4] = b"TSSG";

/// Binary gates, one 0/1 matrix per gated tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    pub task_id: usize,
    pub epsilon: f64,
    pub tensors: Vec<Matrix>,
}

impl GateSet {
    /// Every gate open: the ungated network.
    pub fn all_open(task_id: usize, shapes: &[(usize, usize)]) -> Self {
        Self {
            task_id,
            epsilon: f64::NEG_INFINITY,
            tensors: shapes.iter().map(|&(r, c)| Matrix::ones(r, c)).collect(),
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(Matrix::shape).collect()
    }

    pub fn total(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn ones(&self) -> usize {
        self.tensors.iter().map(Matrix::count_nonzero).sum()
    }

    pub fn ones_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.ones() as f64 / total as f64
        }
    }
}

/// Gate is 1 exactly where the score is strictly greater than `epsilon`.
pub fn threshold(scores: &ScoreSet, epsilon: f64) -> GateSet {
    GateSet {
        task_id: scores.task_id,
        epsilon,
        tensors: scores
            .tensors
            .iter()
            .map(|s| s.map(|v| if v > epsilon { 1.0 } else { 0.0 }))
            .collect(),
    }
}

/// Effective weights `w ⊗ g`.
pub fn select(weights: &Matrix, gates: &Matrix) -> Result<Matrix> {
    tensor::ew(BinaryOp::Mul, weights, gates)
}

/// Bit-packed gates for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedGates {
    pub task_id: u32,
    pub shapes: Vec<(usize, usize)>,
    pub payload: Vec<u8>,
}

impl PackedGates {
    pub fn total_gates(&self) -> usize {
        self.shapes.iter().map(|&(r, c)| r * c).sum()
    }

    /// Size of the encoded file in bytes.
    pub fn encoded_len(&self) -> usize {
        codec::header_len(self.shapes.len()) + self.payload.len() + 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        codec::write_header(&mut out, GATE_MAGIC, self.task_id, &self.shapes)?;
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&codec::crc32(&self.payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader::new(bytes);
        let header = codec::read_header(&mut reader, GATE_MAGIC)?;
        let total = header.element_count();
        let payload = codec::read_checked_payload(&mut reader, total.div_ceil(8))?;
        if total % 8 != 0 {
            let tail = payload[payload.len() - 1] >> (total % 8);
            if tail != 0 {
                return Err(TssError::Format(
                    "nonzero padding bits in gate payload".into(),
                ));
            }
        }
        Ok(Self {
            task_id: header.task_id,
            shapes: header.shapes,
            payload: payload.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| TssError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TssError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| TssError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub fn pack(gates: &GateSet) -> Result<PackedGates> {
    let task_id =
        u32::try_from(gates.task_id).map_err(|_| TssError::Format("task id exceeds u32".into()))?;
    let total = gates.total();
    let mut payload = vec![0u8; total.div_ceil(8)];
    let mut bit = 0usize;
    for t in &gates.tensors {
        for &v in t.data() {
            if v != 0.0 {
                payload[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
    Ok(PackedGates {
        task_id,
        shapes: gates.shapes(),
        payload,
    })
}

/// Inverse of [`pack`]. The threshold is not stored; the result carries
/// `epsilon = 0`.
pub fn unpack(packed: &PackedGates) -> Result<GateSet> {
    let total = packed.total_gates();
    if packed.payload.len() != total.div_ceil(8) {
        return Err(TssError::Format(format!(
            "payload has {} bytes, {} gates need {}",
            packed.payload.len(),
            total,
            total.div_ceil(8)
        )));
    }
    let mut bit = 0usize;
    let mut tensors = Vec::with_capacity(packed.shapes.len());
    for &(r, c) in &packed.shapes {
        let data = (0..r * c)
            .map(|_| {
                let v = (packed.payload[bit / 8] >> (bit % 8)) & 1;
                bit += 1;
                f64::from(v)
            })
            .collect();
        tensors.push(Matrix::from_vec(r, c, data)?);
    }
    Ok(GateSet {
        task_id: packed.task_id as usize,
        epsilon: 0.0,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randn, Rng};

    fn scores(values: &[f64]) -> ScoreSet {
        ScoreSet {
            task_id: 0,
            tensors: vec![Matrix::row_vector(values)],
        }
    }

    fn random_gates(rng: &mut Rng, shapes: &[(usize, usize)]) -> GateSet {
        let s = ScoreSet {
            task_id: 4,
            tensors: shapes.iter().map(|&(r, c)| randn(rng, r, c, 1.0)).collect(),
        };
        threshold(&s, 0.0)
    }

    #[test]
    fn boundary_goes_to_zero() {
        let g = threshold(&scores(&[0.5, -0.2, 0.0]), 0.0);
        assert_eq!(g.tensors[0].data(), &[1.0, 0.0, 0.0]);
        let g = threshold(&scores(&[0.1, 2.0, 1e-300]), 0.0);
        assert_eq!(g.ones(), 3);
    }

    #[test]
    fn nudging_one_score_flips_one_gate() {
        let mut s = scores(&[0.3, 0.3, 0.3, -1.0]);
        let before = threshold(&s, 0.3);
        s.tensors[0].data_mut()[2] += 1e-9;
        let after = threshold(&s, 0.3);
        let flips = before.tensors[0]
            .data()
            .iter()
            .zip(after.tensors[0].data())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(flips, 1);
    }

    #[test]
    fn kaiming_scores_open_about_half() {
        let s = ScoreSet {
            task_id: 0,
            tensors: vec![randn(&mut Rng::new(8), 100, 100, 0.5)],
        };
        let f = threshold(&s, 0.0).ones_fraction();
        assert!((0.47..=0.53).contains(&f), "{f}");
    }

    #[test]
    fn select_cases() {
        let w = Matrix::row_vector(&[2.0, 3.0]);
        assert_eq!(
            select(&w, &Matrix::row_vector(&[1.0, 0.0])).unwrap().data(),
            &[2.0, 0.0]
        );
        let mut rng = Rng::new(2);
        let w = randn(&mut rng, 8, 8, 1.0);
        assert_eq!(select(&w, &Matrix::ones(8, 8)).unwrap(), w);
        assert!(select(&w, &Matrix::ones(8, 7)).is_err());
    }

    #[test]
    fn selected_nonzeros_bounded_by_open_gates() {
        let mut rng = Rng::new(31);
        let mut w = randn(&mut rng, 8, 8, 1.0);
        let g = random_gates(&mut rng, &[(8, 8)]);
        let dense = select(&w, &g.tensors[0]).unwrap();
        // enumeration oracle
        let mut open = 0;
        let mut nonzero = 0;
        for i in 0..64 {
            if g.tensors[0].data()[i] == 1.0 {
                open += 1;
                if w.data()[i] != 0.0 {
                    nonzero += 1;
                }
            }
        }
        assert_eq!(dense.count_nonzero(), nonzero);
        assert_eq!(nonzero, open);
        w.data_mut()[..8].fill(0.0);
        let sparse = select(&w, &g.tensors[0]).unwrap();
        assert!(sparse.count_nonzero() <= g.ones());
    }

    #[test]
    fn packed_sizes() {
        let g = GateSet::all_open(1, &[(4, 4)]);
        let p = pack(&g).unwrap();
        assert_eq!(p.payload.len(), 2);
        assert_eq!(p.to_bytes().unwrap().len(), codec::header_len(1) + 2 + 4);
        assert_eq!(p.encoded_len(), p.to_bytes().unwrap().len());
    }

    #[test]
    fn unaligned_roundtrip() {
        let mut rng = Rng::new(37);
        let g = random_gates(&mut rng, &[(37, 1)]);
        let bytes = pack(&g).unwrap().to_bytes().unwrap();
        let back = unpack(&PackedGates::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.tensors, g.tensors);
        assert_eq!(back.task_id, 4);
    }

    #[test]
    fn bit_order_is_lsb_first() {
        let mut g = GateSet::all_open(0, &[(1, 10)]);
        g.tensors[0].data_mut().fill(0.0);
        g.tensors[0].data_mut()[0] = 1.0;
        g.tensors[0].data_mut()[9] = 1.0;
        let bytes = pack(&g).unwrap().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TSSG");
        assert_eq!(&bytes[4..6], &[1, 0]);
        let payload = &bytes[codec::header_len(1)..codec::header_len(1) + 2];
        assert_eq!(payload, &[0b0000_0001, 0b0000_0010]);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let g = random_gates(&mut Rng::new(1), &[(3, 5), (5, 3)]);
        let bytes = pack(&g).unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PackedGates::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(PackedGates::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 0x01;
        assert!(PackedGates::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("CRC"));
        assert!(PackedGates::from_bytes(&bytes[..10]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn pack_roundtrip(seed in 0u64..10_000, r in 1usize..20, c in 1usize..20, r2 in 1usize..9) {
            let mut rng = Rng::new(seed);
            let g = random_gates(&mut rng, &[(r, c), (c, r2)]);
            let p = pack(&g).unwrap();
            let ones: u32 = p.payload.iter().map(|b| b.count_ones()).sum();
            proptest::prop_assert_eq!(ones as usize, g.ones());
            let back = unpack(&PackedGates::from_bytes(&p.to_bytes().unwrap()).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.tensors, g.tensors);
        }
    }
}
