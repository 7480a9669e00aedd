//! Build a market from JSON, validate it and solve it. Invalid configs are
//! rejected with one message per violated field.

use bess_game::equilibrium::{solve_policy, Policy};
use bess_game::model::MarketModel;
use bess_game::scenarios::baseline_market;

fn main() -> bess_game::Result<()> {
    // round-trip a reference market through JSON and change two operators
    let mut model = MarketModel::from_json(&baseline_market(3).to_json())?;
    model.agents[1].c3 = 1.0;
    model.agents[2].sigma = 1.5;
    model.weights[0][2] = 0.5;
    model.weights[2][0] = 0.5;
    let model = model.validate()?.into_inner();
    let policy = solve_policy(&model, false)?;
    println!("solver: {}", if policy.is_general() { "general" } else { "reduced" });
    println!("controls at noon, Q = 25, S = 5: {:?}", policy.controls(12.0, 25.0, &[5.0; 3])?);

    let mut bad = baseline_market(2);
    bad.agents[0].c1 = -1.0;
    bad.agents[1].rho = 2.0;
    match bad.validate() {
        Ok(_) => println!("unexpectedly valid"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
