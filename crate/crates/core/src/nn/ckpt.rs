//! Flat, versioned binary checkpoint for Q-network parameters.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic      8 bytes  "QNETCKPT"
//! version    u16      currently 1
//! kind       u8       0 = ff, 1 = rnn
//! n_agents   u8
//! input_dim  u32
//! hidden_dim u32
//! n_actions  u32
//! per agent: count u64, then count f64 values in declaration order
//! ```
//!
//! Round-trips are bit-exact: values are written as raw IEEE-754 bit patterns.

use super::{ModelKind, ParamSet};
use crate::{Error, Result};
use std::io::{Read, Write};

const MAGIC: &[u8; 8] = b"QNETCKPT";
const VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, agents: &[ParamSet]) -> Result<()> {
    let first = agents
        .first()
        .ok_or_else(|| Error::Config("checkpoint needs at least one parameter set".into()))?;
    if agents.len() > u8::MAX as usize {
        return Err(Error::Config("too many agents for checkpoint header".into()));
    }
    for ps in agents {
        if ps.kind != first.kind
            || ps.input_dim != first.input_dim
            || ps.hidden_dim != first.hidden_dim
            || ps.n_actions != first.n_actions
        {
            return Err(Error::Config(
                "all checkpointed agents must share one architecture".into(),
            ));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[match first.kind {
        ModelKind::Ff => 0u8,
        ModelKind::Rnn => 1u8,
    }])?;
    w.write_all(&[agents.len() as u8])?;
    w.write_all(&(first.input_dim as u32).to_le_bytes())?;
    w.write_all(&(first.hidden_dim as u32).to_le_bytes())?;
    w.write_all(&(first.n_actions as u32).to_le_bytes())?;
    for ps in agents {
        let flat = ps.flatten();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<ParamSet>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut buf1 = [0u8; 1];
    r.read_exact(&mut buf1)?;
    let kind = match buf1[0] {
        0 => ModelKind::Ff,
        1 => ModelKind::Rnn,
        k => return Err(Error::Format(format!("unknown model kind tag {k}"))),
    };
    r.read_exact(&mut buf1)?;
    let n_agents = buf1[0] as usize;
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let input_dim = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let hidden_dim = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let n_actions = u32::from_le_bytes(buf4) as usize;

    let mut agents = Vec::with_capacity(n_agents);
    let mut buf8 = [0u8; 8];
    for _ in 0..n_agents {
        r.read_exact(&mut buf8)?;
        let count = u64::from_le_bytes(buf8) as usize;
        let mut ps = ParamSet::zeros(kind, input_dim, hidden_dim, n_actions);
        if count != ps.num_params() {
            return Err(Error::Format(format!(
                "checkpoint declares {count} values but the architecture has {}",
                ps.num_params()
            )));
        }
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf8)?;
            flat.push(f64::from_bits(u64::from_le_bytes(buf8)));
        }
        ps.assign_flat(&flat);
        agents.push(ps);
    }
    Ok(agents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact_for_both_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ff: Vec<ParamSet> = (0..3)
            .map(|_| ParamSet::new_ff(7, 5, 4, &mut rng).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ff).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, ff);

        let gru = vec![ParamSet::new_gru(6, 4, 3, &mut rng).unwrap()];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &gru).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), gru);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let agents = vec![ParamSet::new_ff(2, 2, 2, &mut rng).unwrap()];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &agents).unwrap();
        buf[0] ^= 0xff;
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn mixed_architectures_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = ParamSet::new_ff(2, 2, 2, &mut rng).unwrap();
        let b = ParamSet::new_ff(3, 2, 2, &mut rng).unwrap();
        let mut buf = Vec::new();
        assert!(write_checkpoint(&mut buf, &[a, b]).is_err());
    }
}
