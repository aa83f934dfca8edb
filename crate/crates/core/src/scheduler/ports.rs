use rand::Rng;

use crate::routing::RoutingTable;

use super::SchedulerError;

const MAX_REDRAWS: usize = 100;

/// Uniform draw from `range` (inclusive) that no table entry holds.
/// After 100 collisions falls back to a linear scan from the bottom.
pub fn pick_port<R: Rng + ?Sized>(
    table: &RoutingTable,
    range: (u16, u16),
    rng: &mut R,
) -> Result<u16, SchedulerError> {
    let (lo, hi) = range;
    for _ in 0..MAX_REDRAWS {
        let port = rng.random_range(lo..=hi);
        if !table.port_in_use(port) {
            return Ok(port);
        }
    }
    (lo..=hi)
        .find(|&p| !table.port_in_use(p))
        .ok_or(SchedulerError::PortSpaceExhausted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{RouteEntry, RouteState, PORT_MAX, PORT_MIN};
    use crate::wire::ServiceName;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn occupy(table: &mut RoutingTable, port: u16) {
        table.entries.push(RouteEntry {
            job_id: format!("j{port}"),
            service: ServiceName::new("m").unwrap(),
            node: "-".into(),
            port,
            state: RouteState::Submitted,
            updated_at: 0,
        });
    }

    #[test]
    fn empty_table_any_port() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = RoutingTable::new();
        for _ in 0..100 {
            let p = pick_port(&table, (PORT_MIN, PORT_MAX), &mut rng).unwrap();
            assert!((PORT_MIN..=PORT_MAX).contains(&p));
        }
    }

    #[test]
    fn forced_unique_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut table = RoutingTable::new();
        for p in PORT_MIN..=PORT_MAX {
            if p != 20001 {
                occupy(&mut table, p);
            }
        }
        assert_eq!(pick_port(&table, (PORT_MIN, PORT_MAX), &mut rng).unwrap(), 20001);
        occupy(&mut table, 20001);
        assert!(matches!(
            pick_port(&table, (PORT_MIN, PORT_MAX), &mut rng),
            Err(SchedulerError::PortSpaceExhausted)
        ));
    }

    #[test]
    fn sequential_picks_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut table = RoutingTable::new();
        for _ in 0..1000 {
            let p = pick_port(&table, (PORT_MIN, PORT_MAX), &mut rng).unwrap();
            occupy(&mut table, p);
        }
        let distinct: HashSet<u16> = table.entries.iter().map(|e| e.port).collect();
        assert_eq!(distinct.len(), 1000);
    }
}
