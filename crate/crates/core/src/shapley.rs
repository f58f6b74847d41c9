//! Exact Shapley values for small cooperative games.
//!
//! Coalitions are bitmasks: player `i` is a member when bit `i` is set.

use crate::error::{Error, Result};

/// Largest game [`exact_shapley`] will enumerate.
pub const MAX_EXACT_PLAYERS: usize = 20;

/// A cooperative game over `players` players.
pub struct CoalitionGame<'a> {
    players: usize,
    value: Box<dyn Fn(u32) -> f64 + Sync + 'a>,
}

impl<'a> CoalitionGame<'a> {
    pub fn new(players: usize, value: impl Fn(u32) -> f64 + Sync + 'a) -> Self {
        CoalitionGame {
            players,
            value: Box::new(value),
        }
    }

    /// Game with `v(S) = sum of a_i over S`.
    pub fn additive(weights: &'a [f64]) -> Self {
        CoalitionGame::new(weights.len(), move |s| {
            (0..weights.len()).filter(|i| s >> i & 1 == 1).map(|i| weights[i]).sum()
        })
    }

    /// Game backed by a full table of `2^players` values indexed by mask.
    pub fn from_table(table: &'a [f64]) -> Result<Self> {
        let players = table.len().trailing_zeros() as usize;
        if table.is_empty() || 1usize << players != table.len() || players > 31 {
            return Err(Error::invalid(
                "value table",
                format!("length {} is not a power of two", table.len()),
            ));
        }
        Ok(CoalitionGame::new(players, move |s| table[s as usize]))
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn value(&self, coalition: u32) -> f64 {
        (self.value)(coalition)
    }

    pub fn full(&self) -> u32 {
        if self.players >= 32 {
            u32::MAX
        } else {
            (1u32 << self.players) - 1
        }
    }
}

/// `v(coalition) - v(coalition without player)`.
pub fn marginal_contribution(game: &CoalitionGame<'_>, player: usize, coalition: u32) -> Result<f64> {
    if player >= game.players() || player >= 32 {
        return Err(Error::invalid(
            "player",
            format!("index {player} out of range for {} players", game.players()),
        ));
    }
    if coalition & !game.full() != 0 {
        return Err(Error::invalid(
            "coalition",
            format!("{coalition:#b} names unknown players"),
        ));
    }
    if coalition >> player & 1 == 0 {
        return Err(Error::invalid(
            "coalition",
            format!("player {player} is not a member of {coalition:#b}"),
        ));
    }
    Ok(game.value(coalition) - game.value(coalition & !(1 << player)))
}

/// Closed form for two players `a` and `b`. The arithmetic follows the same
/// order as [`exact_shapley`] so the two agree bit for bit.
pub fn two_player_shapley(v_empty: f64, v_a: f64, v_b: f64, v_ab: f64) -> (f64, f64) {
    let s_a = 0.5 * (v_a - v_empty) + 0.5 * (v_ab - v_b);
    let s_b = 0.5 * (v_b - v_empty) + 0.5 * (v_ab - v_a);
    (s_a, s_b)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley values by full subset enumeration. Each coalition value is
/// computed once.
pub fn exact_shapley(game: &CoalitionGame<'_>) -> Result<Vec<f64>> {
    let n = game.players();
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::TooManyPlayers {
            players: n,
            limit: MAX_EXACT_PLAYERS,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let values: Vec<f64> = (0..1u32 << n).map(|s| game.value(s)).collect();
    if let Some(s) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("value of coalition {s:#b}"),
        });
    }
    // weight(s) = s! (n-s-1)! / n! = 1 / (n * C(n-1, s))
    let weights: Vec<f64> = (0..n).map(|s| 1.0 / (n as f64 * binomial(n - 1, s))).collect();
    let mut phi = vec![0.0; n];
    for (i, slot) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        let mut total = 0.0;
        for s in 0..1u32 << n {
            if s & bit != 0 {
                continue;
            }
            total += weights[s.count_ones() as usize] * (values[(s | bit) as usize] - values[s as usize]);
        }
        *slot = total;
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_player_fixtures() {
        let (a, b) = two_player_shapley(0.1, 0.4, 0.3, 0.9);
        assert!((a - 0.45).abs() < 1e-12 && (b - 0.35).abs() < 1e-12);
        assert!((a + b - 0.8).abs() < 1e-12);
        assert_eq!(two_player_shapley(0.0, 1.0, 0.0, 1.0), (1.0, 0.0));
        let (a, b) = two_player_shapley(0.2, 0.5, 0.5, 0.7);
        assert_eq!(a, b);
    }

    #[test]
    fn marginal_contribution_cases() {
        let game = CoalitionGame::new(2, |s| [0.1, 0.4, 0.3, 0.9][s as usize]);
        assert!((marginal_contribution(&game, 0, 0b01).unwrap() - 0.3).abs() < 1e-15);
        assert!((marginal_contribution(&game, 0, 0b11).unwrap() - 0.6).abs() < 1e-15);
        assert!(marginal_contribution(&game, 1, 0b01).is_err());
        assert!(marginal_contribution(&game, 2, 0b11).is_err());
        let constant = CoalitionGame::new(3, |_| 4.2);
        for s in 1..8u32 {
            for p in (0..3).filter(|p| s >> p & 1 == 1) {
                assert_eq!(marginal_contribution(&constant, p, s).unwrap(), 0.0);
            }
        }
        let a = [1.5, -2.0, 0.25];
        let additive = CoalitionGame::additive(&a);
        for s in 1..8u32 {
            for p in (0..3).filter(|p| s >> p & 1 == 1) {
                assert!((marginal_contribution(&additive, p, s).unwrap() - a[p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn squared_size_game_matches_permutation_oracle() {
        // Frozen from an enumeration over all 6 orderings: by symmetry each
        // player gets (9 - 0) / 3 = 3.
        let game = CoalitionGame::new(3, |s| (s.count_ones() as f64).powi(2));
        let phi = exact_shapley(&game).unwrap();
        for v in phi {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refuses_large_games() {
        let game = CoalitionGame::new(21, |_| 0.0);
        assert!(matches!(
            exact_shapley(&game),
            Err(Error::TooManyPlayers { players: 21, .. })
        ));
    }

    #[test]
    fn from_table_checks_length() {
        assert!(CoalitionGame::from_table(&[0.0, 1.0, 2.0]).is_err());
        let t = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(CoalitionGame::from_table(&t).unwrap().players(), 2);
    }
}
