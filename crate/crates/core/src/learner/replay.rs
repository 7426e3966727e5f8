//! FIFO experience replay.
//!
//! Observations are stored as `f32` and shared between consecutive
//! transitions, so a transition's next observation and its successor's
//! observation occupy one allocation.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;

use crate::env::ACTION_DIM;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BSGRPLY1";

pub type SharedObs = Arc<[f32]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: SharedObs,
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_obs: SharedObs,
    pub done: bool,
}

pub fn share_obs(values: &[f64]) -> SharedObs {
    values.iter().map(|&v| v as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("agent.replay_capacity", "must be >= 1"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Draws `n` distinct transitions uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if n == 0 || self.items.len() < n {
            return Err(Error::NotReady(format!(
                "replay holds {} transitions, batch needs {n}",
                self.items.len()
            )));
        }
        let idx = rand::seq::index::sample(rng, self.items.len(), n);
        Ok(idx.iter().map(|i| &self.items[i]).collect())
    }

    /// Binary dump: header, deduplicated observation table, transitions.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut ids: HashMap<*const f32, u32> = HashMap::new();
        let mut table: Vec<&SharedObs> = Vec::new();
        let mut refs = Vec::with_capacity(self.items.len());
        for t in &self.items {
            let mut pair = [0u32; 2];
            for (slot, o) in pair.iter_mut().zip([&t.obs, &t.next_obs]) {
                *slot = *ids.entry(o.as_ptr()).or_insert_with(|| {
                    table.push(o);
                    (table.len() - 1) as u32
                });
            }
            refs.push((pair[0], pair[1]));
        }

        w.write_all(MAGIC)?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(table.len() as u64).to_le_bytes())?;
        for o in &table {
            w.write_all(&(o.len() as u64).to_le_bytes())?;
            for v in o.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.items.len() as u64).to_le_bytes())?;
        for (t, (a, b)) in self.items.iter().zip(refs) {
            w.write_all(&a.to_le_bytes())?;
            w.write_all(&b.to_le_bytes())?;
            for v in t.action {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&t.reward.to_le_bytes())?;
            w.write_all(&[t.done as u8])?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Fault("not a replay buffer file".into()));
        }
        let capacity = read_u64(&mut r)? as usize;
        let n_obs = read_u64(&mut r)? as usize;
        let mut table = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let len = read_u64(&mut r)? as usize;
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)?;
            let obs: SharedObs = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.push(obs);
        }
        let n = read_u64(&mut r)? as usize;
        let mut buf = ReplayBuffer::new(capacity)?;
        let lookup = |i: u32| {
            table
                .get(i as usize)
                .cloned()
                .ok_or_else(|| Error::Fault(format!("replay file references missing observation {i}")))
        };
        for _ in 0..n {
            let a = read_u32(&mut r)?;
            let b = read_u32(&mut r)?;
            let mut action = [0.0; ACTION_DIM];
            for v in &mut action {
                *v = read_f64(&mut r)?;
            }
            let reward = read_f64(&mut r)?;
            let mut done = [0u8];
            r.read_exact(&mut done)?;
            buf.push(Transition {
                obs: lookup(a)?,
                action,
                reward,
                next_obs: lookup(b)?,
                done: done[0] != 0,
            });
        }
        Ok(buf)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(i: usize) -> Transition {
        Transition {
            obs: share_obs(&[i as f64]),
            action: [i as f64 * 0.01; ACTION_DIM],
            reward: -(i as f64),
            next_obs: share_obs(&[i as f64 + 1.0]),
            done: i % 3 == 0,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2).unwrap();
        for i in 0..3 {
            b.push(tr(i));
        }
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(0).unwrap().reward, -1.0);
    }

    #[test]
    fn underfilled_is_not_ready() {
        let mut b = ReplayBuffer::new(10).unwrap();
        b.push(tr(0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(2, &mut rng), Err(Error::NotReady(_))));
    }

    #[test]
    fn sampling_is_seeded_and_distinct() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for i in 0..100 {
            b.push(tr(i));
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            b.sample(32, &mut rng).unwrap().iter().map(|t| t.reward).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        let mut s = draw(5);
        s.sort_by(f64::total_cmp);
        s.dedup();
        assert_eq!(s.len(), 32);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for i in 0..100 {
            b.push(tr(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; 100];
        for _ in 0..10_000 {
            for t in b.sample(1, &mut rng).unwrap() {
                counts[(-t.reward) as usize] += 1;
            }
        }
        assert!(counts.iter().all(|&c| (70..=130).contains(&c)), "{counts:?}");
    }

    #[test]
    fn binary_round_trip_shares_observations() {
        let mut b = ReplayBuffer::new(5).unwrap();
        let mut prev = share_obs(&[0.5, -0.25]);
        for i in 0..7 {
            let next = share_obs(&[i as f64, 0.125]);
            b.push(Transition {
                obs: prev.clone(),
                action: [0.1 * i as f64; ACTION_DIM],
                reward: i as f64,
                next_obs: next.clone(),
                done: i == 6,
            });
            prev = next;
        }
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        let back = ReplayBuffer::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, b);
        assert!(Arc::ptr_eq(&back.get(0).unwrap().next_obs, &back.get(1).unwrap().obs));
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }
}
