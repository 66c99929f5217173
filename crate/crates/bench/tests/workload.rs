use hookscope::attribution::MultiTarget;
use hookscope_bench::Workload;

#[test]
fn vectorized_and_per_target_ig_agree() {
    let mut w = Workload::new(8, 2, 3, 4, 1).unwrap();
    let a = w.ig(8, MultiTarget::Vectorized).unwrap();
    let b = w.ig(8, MultiTarget::PerTarget).unwrap();
    assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
}

#[test]
fn every_task_runs_on_every_size() {
    for (width, depth) in [(4, 1), (6, 3)] {
        let mut w = Workload::new(width, depth, 2, 3, 0).unwrap();
        assert!(w.lrp().unwrap().is_finite());
        assert_eq!(w.cache().unwrap(), 2);
        assert_eq!(w.intervene().unwrap().get_tensor("y").unwrap().shape(), &[2, 3]);
    }
}
