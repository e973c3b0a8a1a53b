//! Fixtures for the clearing benchmarks: a disaster-response roster with a
//! batch of pending tasks, ready for one clearing round.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roc_core::clearinghouse::{ClearingConfig, ResourcePool};
use roc_core::scenarios::disaster_response;
use roc_core::{AgentId, AgentProfile, ClearingState, Mechanism, SolverMode};

pub struct RoundFixture {
    pub state: ClearingState,
    pub roster: BTreeMap<AgentId, AgentProfile>,
    pub config: ClearingConfig,
}

/// `tasks` pending tasks drawn round-robin from the scenario templates, all
/// agents idle.
pub fn disaster_round(tasks: usize, mechanism: Mechanism, mode: SolverMode) -> RoundFixture {
    let scenario = disaster_response();
    let roster: BTreeMap<AgentId, AgentProfile> = scenario
        .agents()
        .expect("inline roster")
        .iter()
        .map(|a| (a.descriptor.agent_id.clone(), a.clone()))
        .collect();
    let mut state = ClearingState::new(roster.values().map(|a| a.descriptor.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let templates = &scenario.task_templates;
    for i in 0..tasks {
        let t =
            templates[i % templates.len()].instantiate(format!("task-{i}").into(), 0.0, &mut rng);
        state.active_tasks.insert(t.id.clone(), t);
    }
    for (name, budget) in &scenario.resource_pools {
        state.resource_pools.insert(
            name.clone(),
            ResourcePool {
                budget: *budget,
                consumed: 0.0,
            },
        );
    }
    let mut config = scenario.clearing_config();
    config.mechanism = mechanism;
    config.solver.mode = mode;
    RoundFixture {
        state,
        roster,
        config,
    }
}
