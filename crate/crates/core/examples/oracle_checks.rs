//! Runs the fast acceptance checks that compare against reference oracles.

use streamvq::acceptance::Acceptance;

fn main() {
    let mut acc = Acceptance::default();
    for id in [1, 2, 3, 4, 5, 8, 9] {
        println!("{}", acc.run(id));
    }
}
