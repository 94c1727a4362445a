//! Compressed archive ("MOEC").
//!
//! Little-endian layout:
//!
//! ```text
//! "MOEC" | version u32 | E G K d_in d_out r (u32 each) | precision u8 | mean_intra_similarity f64
//! G group sections, each:
//!   medoid u32 | K member ids u32 | pruned bitset ceil(K/8) bytes, LSB first
//!   base: d_out·d_in binary16 values, row-major
//!   residuals, precision 0 (FP64): per unpruned member in order, A then B, row-major f64
//!   residuals, precision 1 (INT4): scale f64 | zero_point u8 | count u64 | ceil(count/2) packed bytes
//! ```
//!
//! In INT4 mode one block covers every unpruned member's `A` then `B` elements.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::GroupAssignment;
use crate::error::{MoeError, Result};
use crate::io::{read_f64, read_u32, read_u8, write_f64, write_u32, write_u8};
use crate::numerics::{FactorPair, Matrix};
use crate::quantization::{dequantize_group, decode_fp16, encode_fp16, quantize_group, Fp16Payload, QuantBlock};

use super::GroupedParams;

const MAGIC: &[u8; 4] = b"MOEC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualPrecision {
    Fp64,
    Int4,
}

impl ResidualPrecision {
    fn tag(self) -> u8 {
        match self {
            Self::Fp64 => 0,
            Self::Int4 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Self::Fp64),
            1 => Ok(Self::Int4),
            _ => Err(MoeError::Format(format!("unknown precision tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResidualPayload {
    Fp64(Vec<FactorPair>),
    Int4(QuantBlock),
}

/// Shape information every group section is decoded against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchiveDims {
    pub k: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSection {
    pub medoid: usize,
    pub members: Vec<usize>,
    pub pruned: Vec<bool>,
    pub base: Fp16Payload,
    pub residuals: ResidualPayload,
}

impl GroupSection {
    pub fn encode(gp: &GroupedParams, g: usize, precision: ResidualPrecision) -> Result<Self> {
        let a = gp.assignment();
        let members = a.members(g).to_vec();
        let pruned: Vec<bool> = members.iter().map(|&i| gp.residual(i).is_none()).collect();
        let factors: Vec<FactorPair> = members.iter().filter_map(|&i| gp.residual(i).cloned()).collect();
        let residuals = match precision {
            ResidualPrecision::Fp64 => ResidualPayload::Fp64(factors),
            ResidualPrecision::Int4 => {
                let values: Vec<f64> = factors
                    .iter()
                    .flat_map(|f| f.a.as_slice().iter().chain(f.b.as_slice()).copied())
                    .collect();
                if values.is_empty() {
                    ResidualPayload::Int4(QuantBlock::empty())
                } else {
                    ResidualPayload::Int4(quantize_group(&values)?)
                }
            }
        };
        Ok(Self { medoid: a.medoids()[g], members, pruned, base: encode_fp16(gp.base(g)), residuals })
    }

    pub fn precision(&self) -> ResidualPrecision {
        match self.residuals {
            ResidualPayload::Fp64(_) => ResidualPrecision::Fp64,
            ResidualPayload::Int4(_) => ResidualPrecision::Int4,
        }
    }

    /// Base matrix and per-member residuals (member order).
    pub fn decode(&self, dims: ArchiveDims) -> Result<(Matrix, Vec<Option<FactorPair>>)> {
        let base = decode_fp16(&self.base);
        let factors: Vec<FactorPair> = match &self.residuals {
            ResidualPayload::Fp64(f) => f.clone(),
            ResidualPayload::Int4(q) => {
                let values = dequantize_group(q);
                let per = dims.r * (dims.d_in + dims.d_out);
                if !values.len().is_multiple_of(per.max(1)) {
                    return Err(MoeError::Format("INT4 block length is not a whole number of factor pairs".into()));
                }
                values
                    .chunks(per)
                    .map(|chunk| {
                        let (a, b) = chunk.split_at(dims.d_out * dims.r);
                        FactorPair::new(
                            Matrix::new(dims.d_out, dims.r, a.to_vec())?,
                            Matrix::new(dims.d_in, dims.r, b.to_vec())?,
                        )
                    })
                    .collect::<Result<_>>()?
            }
        };
        if factors.len() != self.pruned.iter().filter(|p| !**p).count() {
            return Err(MoeError::Format("residual count disagrees with pruned mask".into()));
        }
        let mut it = factors.into_iter();
        let residuals = self.pruned.iter().map(|&p| if p { None } else { it.next() }).collect();
        Ok((base, residuals))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_u32(w, self.medoid as u32)?;
        for &m in &self.members {
            write_u32(w, m as u32)?;
        }
        let mut bits = vec![0u8; self.pruned.len().div_ceil(8)];
        for (i, &p) in self.pruned.iter().enumerate() {
            if p {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bits)?;
        self.base.write_bits(w)?;
        match &self.residuals {
            ResidualPayload::Fp64(factors) => {
                for f in factors {
                    for &v in f.a.as_slice().iter().chain(f.b.as_slice()) {
                        write_f64(w, v)?;
                    }
                }
            }
            ResidualPayload::Int4(q) => q.write_to(w)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, dims: ArchiveDims, precision: ResidualPrecision) -> Result<Self> {
        let medoid = read_u32(r)? as usize;
        let members = (0..dims.k).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut bits = vec![0u8; dims.k.div_ceil(8)];
        r.read_exact(&mut bits)?;
        let pruned: Vec<bool> = (0..dims.k).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let base = Fp16Payload::read_bits(r, dims.d_out, dims.d_in)?;
        let live = pruned.iter().filter(|p| !**p).count();
        let residuals = match precision {
            ResidualPrecision::Fp64 => {
                let mut factors = Vec::with_capacity(live);
                for _ in 0..live {
                    let a = (0..dims.d_out * dims.r).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
                    let b = (0..dims.d_in * dims.r).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
                    factors.push(FactorPair::new(Matrix::new(dims.d_out, dims.r, a)?, Matrix::new(dims.d_in, dims.r, b)?)?);
                }
                ResidualPayload::Fp64(factors)
            }
            ResidualPrecision::Int4 => {
                let q = QuantBlock::read_from(r)?;
                if q.count != live * dims.r * (dims.d_in + dims.d_out) {
                    return Err(MoeError::Format(format!("INT4 block holds {} values for {live} residuals", q.count)));
                }
                ResidualPayload::Int4(q)
            }
        };
        Ok(Self { medoid, members, pruned, base, residuals })
    }

    /// Exact number of bytes `write_to` produces.
    pub fn encoded_len(&self) -> usize {
        let ids = 4 * (1 + self.members.len());
        let bits = self.pruned.len().div_ceil(8);
        let base = 2 * self.base.bits.len();
        let res = match &self.residuals {
            ResidualPayload::Fp64(f) => f.iter().map(|p| 8 * p.element_count()).sum(),
            ResidualPayload::Int4(q) => QuantBlock::encoded_len(q.count),
        };
        ids + bits + base + res
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedArchive {
    pub e: usize,
    pub dims: ArchiveDims,
    pub precision: ResidualPrecision,
    pub mean_intra_similarity: f64,
    pub sections: Vec<GroupSection>,
}

impl CompressedArchive {
    pub fn from_grouped(gp: &GroupedParams, precision: ResidualPrecision) -> Result<Self> {
        let sections = (0..gp.num_groups())
            .map(|g| GroupSection::encode(gp, g, precision))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            e: gp.num_experts(),
            dims: ArchiveDims { k: gp.assignment().group_size(), d_in: gp.d_in(), d_out: gp.d_out(), r: gp.rank() },
            precision,
            mean_intra_similarity: gp.assignment().mean_intra_similarity,
            sections,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.sections.len()
    }

    /// Decoded parameters: FP16-rounded bases and (for INT4) dequantized factors.
    pub fn to_grouped(&self) -> Result<GroupedParams> {
        let groups = self.sections.iter().map(|s| s.members.clone()).collect();
        let medoids = self.sections.iter().map(|s| s.medoid).collect();
        let assignment = GroupAssignment::new(groups, medoids, self.mean_intra_similarity)
            .map_err(|e| MoeError::Format(format!("archive grouping: {e}")))?;
        let mut bases = Vec::with_capacity(self.sections.len());
        let mut residuals = vec![None; self.e];
        for s in &self.sections {
            let (base, res) = s.decode(self.dims)?;
            bases.push(base);
            for (&i, f) in s.members.iter().zip(res) {
                residuals[i] = f;
            }
        }
        GroupedParams::from_parts(assignment, bases, residuals, self.dims.r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        let d = self.dims;
        for v in [self.e, self.sections.len(), d.k, d.d_in, d.d_out, d.r] {
            write_u32(w, v as u32)?;
        }
        write_u8(w, self.precision.tag())?;
        write_f64(w, self.mean_intra_similarity)?;
        for s in &self.sections {
            s.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MoeError::Format("not a compressed archive".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(MoeError::Format(format!("unsupported archive version {version}")));
        }
        let mut h = [0usize; 6];
        for v in &mut h {
            *v = read_u32(r)? as usize;
        }
        let [e, g, k, d_in, d_out, rank] = h;
        if g == 0 || k == 0 || g * k != e || d_in == 0 || d_out == 0 || rank == 0 || rank > d_in.min(d_out) {
            return Err(MoeError::Format(format!("inconsistent header E={e} G={g} K={k} r={rank}")));
        }
        let precision = ResidualPrecision::from_tag(read_u8(r)?)?;
        let mean_intra_similarity = read_f64(r)?;
        let dims = ArchiveDims { k, d_in, d_out, r: rank };
        let sections = (0..g)
            .map(|_| GroupSection::read_from(r, dims, precision))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { e, dims, precision, mean_intra_similarity, sections })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
