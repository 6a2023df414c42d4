use mfb_core::bench::{
    build_fusion, default_grid, param_report, read_csv, throughput, write_csv, BenchDims, Operator,
    Timing,
};

fn enumerated(dims: BenchDims) -> usize {
    let f = build_fusion(dims, 3).unwrap();
    f.named_params().iter().map(|(_, t)| t.numel()).sum()
}

#[test]
fn full_scale_configurations() {
    let r = param_report(&default_grid());
    let mfb = r.iter().find(|r| r.operator == Operator::Mfb).unwrap();
    assert_eq!((mfb.k, mfb.o), (5, 1000));
    assert_eq!(mfb.projection_param_count, 20_480_000);
    assert_eq!(mfb.intermediate_dim, 5000);
    let mlb = r.iter().find(|r| r.operator == Operator::Mlb).unwrap();
    assert_eq!(mlb.projection_param_count, 4_096_000);
    let mcb = r.iter().find(|r| r.operator == Operator::Mcb).unwrap();
    assert_eq!(mcb.d, 16000);
    assert_eq!(mcb.projection_param_count, 0);
    assert_eq!(mcb.intermediate_dim, 16000);
    assert!(mfb.intermediate_dim < mcb.intermediate_dim);
}

#[test]
fn closed_form_matches_enumeration() {
    let mut grid = vec![BenchDims::mfb(2048, 2048, 5, 1000)];
    for (m, n) in [(1, 1), (3, 7), (16, 5)] {
        for k in 1..=4 {
            for o in [1, 2, 9] {
                grid.push(BenchDims::mfb(m, n, k, o));
            }
            grid.push(BenchDims::mlb(m, n, k + 2));
            grid.push(BenchDims::mcb(m, n, 4 * k));
        }
    }
    for (dims, r) in grid.iter().zip(param_report(&grid)) {
        assert_eq!(r.projection_param_count, enumerated(*dims), "{dims:?}");
        assert_eq!(
            r.intermediate_dim,
            build_fusion(*dims, 0).unwrap().intermediate_dim()
        );
    }
}

#[test]
fn single_repetition_and_positive_timings() {
    let t = Timing {
        batch: 4,
        repetitions: 1,
        warmup: 0,
        seed: 1,
    };
    let r = throughput(BenchDims::mcb(8, 8, 16), &t).unwrap();
    assert!(r.forward_ns_per_call > 0.0 && r.forward_ns_per_call.is_finite());
    assert!(r.backward_ns_per_call > 0.0);
}

#[test]
fn doubling_batch_scales_forward_time() {
    let dims = BenchDims::mfb(256, 256, 5, 100);
    let t = Timing {
        batch: 64,
        repetitions: 21,
        warmup: 5,
        seed: 0,
    };
    let small = throughput(dims, &t).unwrap();
    let large = throughput(dims, &Timing { batch: 128, ..t }).unwrap();
    let ratio = large.forward_ns_per_call / small.forward_ns_per_call;
    assert!((1.5..=3.0).contains(&ratio), "ratio {ratio}");
    assert!(large.peak_bytes_estimate > small.peak_bytes_estimate);
}

#[test]
fn csv_round_trip() {
    let mut rows = param_report(&default_grid());
    rows[0].forward_ns_per_call = 12345.678901234;
    rows[1].backward_ns_per_call = 0.1 + 0.2;
    let mut buf = Vec::new();
    write_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("operator,m,n,k,o,d,projection_param_count,intermediate_dim,forward_ns_per_call,backward_ns_per_call,peak_bytes_estimate\n"));
    assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
}
