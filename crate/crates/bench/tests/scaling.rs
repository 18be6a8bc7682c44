use catf_bench::{bench_attention, render_report, BenchReport, Variant};

fn report() -> BenchReport {
    bench_attention(&[Variant::Full, Variant::Linear], &[128, 256, 512, 1024], 64, 2, 10, 7).unwrap()
}

#[test]
fn time_scales_quadratically_and_linearly() {
    let r = report();
    let full = r.slope(Variant::Full).unwrap();
    let linear = r.slope(Variant::Linear).unwrap();
    assert!((1.7..=2.3).contains(&full), "full slope {full}");
    assert!((0.8..=1.4).contains(&linear), "linear slope {linear}");
    for v in [Variant::Full, Variant::Linear] {
        let rows = r.rows_for(v);
        assert!(
            rows.windows(2).all(|w| w[1].median_us >= w[0].median_us),
            "{v} not monotone"
        );
        assert!(rows.iter().all(|row| row.median_us > 0.0 && row.iqr_us >= 0.0));
    }
    assert_eq!(r.repetitions, 10);
    assert_eq!(r.threads, 1);
}

#[test]
fn weight_buffer_is_n_by_n_vs_n_by_p() {
    let r = bench_attention(
        &[Variant::Full, Variant::Linear, Variant::LinearShared],
        &[64, 512],
        64,
        1,
        10,
        1,
    )
    .unwrap();
    let full = r.peak_bytes(Variant::Full, 512).unwrap();
    assert_eq!(full, 512 * 512 * 8);
    for v in [Variant::Linear, Variant::LinearShared] {
        assert_eq!(r.peak_bytes(v, 512).unwrap(), 512 * 64 * 8);
        assert_eq!(full, 8 * r.peak_bytes(v, 512).unwrap());
        // at p = n the buffers coincide
        assert_eq!(r.peak_bytes(v, 64), r.peak_bytes(Variant::Full, 64));
    }
}

#[test]
fn render_writes_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let r = bench_attention(
        &[Variant::Full, Variant::LinearShared],
        &[32, 64, 96, 128],
        16,
        1,
        10,
        3,
    )
    .unwrap();
    let out = render_report(&r, dir.path()).unwrap();
    assert_eq!(out.slopes.len(), 2);
    let table = std::fs::read_to_string(&out.table).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,n,p,median_us,iqr_us,peak_buffer_bytes");
    assert_eq!(lines.len(), 1 + 8);
    let svg = std::fs::read_to_string(&out.plot).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("slope"));

    let empty = BenchReport { rows: vec![], ..r };
    assert!(render_report(&empty, dir.path()).is_err());
}
