//! Shared helpers for unit tests.

use rand::RngCore;

#[track_caller]
pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

/// RNG that replays scripted uniform draws in `[0, 1)`.
pub struct ScriptedRng {
    draws: Vec<f64>,
    pos: usize,
}

impl ScriptedRng {
    pub fn new(draws: &[f64]) -> Self {
        ScriptedRng {
            draws: draws.to_vec(),
            pos: 0,
        }
    }
}

impl RngCore for ScriptedRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let u = self.draws[self.pos % self.draws.len()];
        self.pos += 1;
        // inverse of rand's 53-bit float conversion
        ((u * (1u64 << 53) as f64) as u64) << 11
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
