//! A run directory end to end: generate, train, then answer JSON queries.

use streamvq::config::RunConfig;
use streamvq::run::{gen, train, TrainOptions};
use streamvq::server::Server;

fn main() {
    let dir = std::env::temp_dir().join("streamvq-server-example");
    let mut cfg = RunConfig {
        seed: 5,
        out: dir.clone(),
        snapshot_cadence: 10_000,
        ..Default::default()
    };
    cfg.corpus.items = 2_000;
    cfg.corpus.users = 50;
    cfg.corpus.groups = 10;
    cfg.stream.impressions = 30_000;
    cfg.train.k = 32;
    cfg.serve.probe = 8;
    cfg.serve.target_size = 5;

    gen(&cfg).unwrap();
    let s = train(&cfg, &TrainOptions::default()).unwrap();
    println!("snapshots {:?} in {}", s.snapshots, dir.display());

    let server = Server::open(&dir, cfg.serve.clone());
    for req in [
        r#"{"user": 3}"#,
        r#"{"user": 3, "probe": 32, "l": 1, "S": 3}"#,
        r#"{"user": 123456}"#,
        r#"{"cmd": "reload"}"#,
    ] {
        println!("{req}\n  -> {}", server.handle(req));
    }
}
