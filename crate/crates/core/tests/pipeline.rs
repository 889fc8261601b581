use mraug_core::io::{self, WriteOptions};
use mraug_core::sim::{self, SimConfig, TrajectoryName};
use mraug_core::{augment, evenness_report, slice_episode, Method};

fn episodes(n: u64) -> Vec<mraug_core::Episode> {
    let mut cfg = SimConfig::reference();
    cfg.duration_s = 0.5;
    let traj = sim::scripted_trajectories(TrajectoryName::PickSweep, cfg.num_joints());
    (0..n)
        .map(|seed| {
            cfg.seed = seed;
            sim::simulate_episode(&cfg, &traj).unwrap().0
        })
        .collect()
}

#[test]
fn simulated_episodes_augment_evenly() {
    let eps = episodes(3);
    for method in [Method::Forward, Method::Dabi] {
        let ds = augment(&eps, method).unwrap();
        assert_eq!(ds.len(), 3 * 10);
        for ep in &eps {
            assert!(evenness_report(&ds, ep).unwrap().is_even());
        }
    }
}

#[test]
fn seeds_change_the_data_but_not_the_shape() {
    let eps = episodes(2);
    assert_ne!(eps[0].leader(), eps[1].leader());
    assert_eq!(eps[0].sample_count(), eps[1].sample_count());
    assert_eq!(episodes(1)[0], eps[0]);
}

#[test]
fn persisted_dataset_matches_fresh_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = episodes(2);
    let mut opts = WriteOptions::default();
    for ep in &eps {
        let dir = tmp.path().join("episodes").join(ep.id());
        io::write_episode(ep, &dir, &WriteOptions::default()).unwrap();
        opts.source_dirs.insert(ep.id().to_owned(), dir);
    }
    let ds = augment(&eps, Method::Dabi).unwrap();
    let dir = tmp.path().join("dataset");
    io::write_dataset(&ds, &dir, &opts).unwrap();

    let back = io::read_dataset(&dir).unwrap();
    let sources = io::read_dataset_sources(&dir).unwrap();
    for sub in back.episodes() {
        let src = io::read_episode(&sources[&sub.provenance.source_episode_id]).unwrap();
        assert_eq!(
            *sub,
            slice_episode(&src, sub.provenance.offset, Method::Dabi)
        );
    }
}
