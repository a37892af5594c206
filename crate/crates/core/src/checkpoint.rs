//! The "GKDC" checkpoint format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GKDC"  u32 version  u64 config hash
//! u32 len + canonical config text     u32 len + variant label
//! u32 record count
//! per record: u32 len + UTF-8 name, u8 group tag, u32 rank, rank x u32 dims,
//!             numel x f64 payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! The embedded config lets a checkpoint be evaluated without the file it
//! was trained from. Group tags must agree with the tensor names.

use std::fs;
use std::path::Path;

use crate::bytes::{put_f64, put_u32, put_u64, to_u32, Reader};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Arch, Network};
use crate::params::{ParamGroup, ParamStore, Role, Side};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GKDC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Which trainer produced it, e.g. `teacher` or `full`.
    pub variant: String,
    pub side: Side,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: RunConfig, variant: impl Into<String>, net: &Network) -> Checkpoint {
        Checkpoint {
            config,
            variant: variant.into(),
            side: net.side,
            params: net.params.clone(),
        }
    }

    /// Architecture implied by the embedded config and the records present.
    pub fn arch(&self) -> Arch {
        match self.side {
            Side::Teacher => self.config.teacher_arch(),
            Side::Student => self
                .config
                .student_arch(self.params.has_role(Role::Attention), self.params.has_role(Role::Cvae)),
        }
    }

    /// Rebuild the network, checking every tensor shape against the arch.
    pub fn network(&self) -> Result<Network> {
        Network::from_params(self.arch(), self.side, self.params.clone())
    }

    /// Rebuild against an externally supplied arch, e.g. the teacher of a new run.
    pub fn network_for(&self, arch: Arch, side: Side) -> Result<Network> {
        if self.side != side {
            return Err(Error::Incompatible(format!(
                "checkpoint holds a {:?} network, expected {side:?}",
                self.side
            )));
        }
        Network::from_params(arch, side, self.params.clone())
    }

    /// Drop the CVAE records. Inference never reads them.
    pub fn strip_cvae(&mut self) {
        self.params.remove_role(Role::Cvae);
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.config.hash());
        put_str(&mut out, &self.config.to_canonical(), "config text")?;
        put_str(&mut out, &self.variant, "variant")?;
        put_u32(&mut out, to_u32(self.params.len(), "record count")?);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name, "tensor name")?;
            let role = Role::of(name).expect("store names carry roles");
            out.push(ParamGroup::of(self.side, role).tag());
            put_u32(&mut out, to_u32(t.shape().len(), "rank")?);
            for &d in t.shape() {
                put_u32(&mut out, to_u32(d, "extent")?);
            }
            for &v in t.data() {
                put_f64(&mut out, v);
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(buf);
        r.magic(MAGIC)?;
        if buf.len() < 12 {
            return Err(Error::Format {
                offset: buf.len() as u64,
                msg: "truncated before the checksum".into(),
            });
        }
        let (body, footer) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader::new(body);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let at = r.offset();
        let hash = r.u64("config hash")?;
        let text = get_str(&mut r, "config text")?;
        let config = RunConfig::parse(&text).map_err(|e| Error::Format {
            offset: at,
            msg: format!("embedded config unreadable: {e}"),
        })?;
        if config.hash() != hash {
            return Err(Error::Format {
                offset: at,
                msg: format!("config hash {hash:#018x} does not match embedded config"),
            });
        }
        let variant = get_str(&mut r, "variant")?;
        let count = r.u32("record count")?;
        let mut params = ParamStore::new();
        let mut side = None;
        for _ in 0..count {
            let at = r.offset();
            let name = get_str(&mut r, "tensor name")?;
            let Some(role) = Role::of(&name) else {
                return r.fail(format!("tensor `{name}` has no known role prefix"));
            };
            if params.get(&name).is_some() {
                return r.fail(format!("tensor `{name}` appears twice"));
            }
            let tag = r.u8("group tag")?;
            let group = ParamGroup::from_tag(tag).map_or_else(|| r.fail(format!("unknown group tag {tag}")), Ok)?;
            let s = if group == ParamGroup::TeacherAll { Side::Teacher } else { Side::Student };
            if ParamGroup::of(s, role) != group || side.is_some_and(|prev| prev != s) {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("group tag `{group}` does not fit tensor `{name}`"),
                });
            }
            side = Some(s);
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(numel) = numel.filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining())) else {
                return r.fail(format!("truncated payload for `{name}`"));
            };
            let data = r.f64s(numel, "payload")?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.remaining() != 0 {
            return r.fail(format!("{} unexpected bytes after the last record", r.remaining()));
        }
        let Some(side) = side else {
            return r.fail("checkpoint has no tensors");
        };
        Ok(Checkpoint {
            config,
            variant,
            side,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    put_u32(out, to_u32(s.len(), what)?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn get_str(r: &mut Reader<'_>, what: &str) -> Result<String> {
    let n = r.u32(what)? as usize;
    let at = r.offset();
    let raw = r.take(n, what)?;
    String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
        offset: at,
        msg: format!("{what} is not UTF-8"),
    })
}
