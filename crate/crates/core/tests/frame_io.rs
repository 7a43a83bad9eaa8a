use std::io::Write;

use survey_coupling::frame::{
    generate_stratified_population, ingest_frame, population_summary, write_frame, FrameSchema,
    StratifiedConfig, SyntheticConfig,
};
use survey_coupling::Error;

fn write_temp(name: &str, text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    std::fs::File::create(&path).unwrap().write_all(text.as_bytes()).unwrap();
    (dir, path)
}

#[test]
fn roundtrip_preserves_frame_exactly() {
    let cfg = StratifiedConfig {
        model: SyntheticConfig {
            mean_size: 4.0,
            size_cv: 0.4,
            ..SyntheticConfig::population3(21)
        },
        stratum_sizes: vec![7; 11],
        cuts: vec![18.0, 20.0, 22.0],
    };
    let frame = generate_stratified_population(&cfg).unwrap();
    let mut buf = Vec::new();
    write_frame(&frame, &mut buf).unwrap();
    let (_dir, path) = write_temp("frame.csv", std::str::from_utf8(&buf).unwrap());
    let back = ingest_frame(&path, &FrameSchema::default()).unwrap();
    assert_eq!(back, frame);
    assert_eq!(back.strata().unwrap().len(), 11);

    // real-valued variables survive too
    let plain = survey_coupling::frame::generate_population(&SyntheticConfig {
        n_psu: 30,
        ..SyntheticConfig::population3(3)
    })
    .unwrap();
    let mut buf = Vec::new();
    write_frame(&plain, &mut buf).unwrap();
    let (_dir, path) = write_temp("plain.csv", std::str::from_utf8(&buf).unwrap());
    let back = ingest_frame(&path, &FrameSchema::default()).unwrap();
    assert_eq!(back, plain);
    for v in 0..plain.n_vars() {
        assert_eq!(
            population_summary(&back, v).unwrap(),
            population_summary(&plain, v).unwrap()
        );
    }
}

#[test]
fn tab_separated_and_custom_schema() {
    let text = "cluster\tunit\tz2\tz1\n1\t1\t5\t1.5\n1\t2\t6\t2.5\n2\t1\t7\t3.5\n";
    let (_dir, path) = write_temp("frame.txt", text);
    let schema = FrameSchema {
        psu_column: "cluster".into(),
        ssu_column: "unit".into(),
        stratum_column: None,
        y_prefix: "z".into(),
    };
    let f = ingest_frame(&path, &schema).unwrap();
    assert_eq!(f.var_names(), ["z1", "z2"]);
    assert_eq!(f.n_psu(), 2);
    assert_eq!(f.psu(0).y(1), [2.5, 6.0]);
    assert!(f.strata().is_none());
}

#[test]
fn psus_group_by_stratum_in_first_appearance_order() {
    let text = "stratum,psu_id,ssu_id,y1\nb,10,1,1\na,20,1,2\nb,30,1,3\nb,10,2,4\n";
    let (_dir, path) = write_temp("f.csv", text);
    let f = ingest_frame(&path, &FrameSchema::default()).unwrap();
    let ids: Vec<i64> = f.psus().iter().map(|p| p.psu_id).collect();
    assert_eq!(ids, [10, 30, 20]);
    let labels: Vec<&str> = f.strata().unwrap().iter().map(|s| s.label.as_str()).collect();
    assert_eq!(labels, ["b", "a"]);
    assert_eq!(f.psu(0).size(), 2);
}

#[test]
fn malformed_inputs_report_line_numbers() {
    let cases = [
        ("psu_id,ssu_id,y1\n1,1,2\n1,2,x\n", 3),
        ("psu_id,ssu_id,y1\n1,1,2\n1.5,2,3\n", 3),
        ("psu_id,ssu_id,y1\n1,1,2\n2,1,inf\n", 3),
    ];
    for (text, line) in cases {
        let (_dir, path) = write_temp("bad.csv", text);
        match ingest_frame(&path, &FrameSchema::default()) {
            Err(Error::MalformedRow { line: l, .. }) => assert_eq!(l, line, "{text}"),
            other => panic!("expected malformed row for {text:?}, got {other:?}"),
        }
    }
    let (_dir, path) = write_temp("ragged.csv", "psu_id,ssu_id,y1,y2\n1,1,2,3\n1,2,4\n");
    assert!(matches!(
        ingest_frame(&path, &FrameSchema::default()),
        Err(Error::RaggedRow { line: 3, expected: 2, found: 1 })
    ));
    let (_dir, path) = write_temp("dup.csv", "psu_id,ssu_id,y1\n1,1,2\n1,1,4\n");
    assert!(matches!(
        ingest_frame(&path, &FrameSchema::default()),
        Err(Error::DuplicateUnit { psu_id: 1, ssu_id: 1 })
    ));
    let (_dir, path) = write_temp("empty.csv", "psu_id,ssu_id,y1\n");
    assert!(matches!(ingest_frame(&path, &FrameSchema::default()), Err(Error::EmptyFrame)));
    let (_dir, path) = write_temp("nocol.csv", "psu,ssu_id,y1\n1,1,1\n");
    assert!(matches!(
        ingest_frame(&path, &FrameSchema::default()),
        Err(Error::MalformedRow { line: 1, .. })
    ));
}

#[test]
fn psu_split_across_strata_is_rejected() {
    let (_dir, path) = write_temp("s.csv", "stratum,psu_id,ssu_id,y1\na,1,1,1\nb,1,2,1\n");
    assert!(matches!(
        ingest_frame(&path, &FrameSchema::default()),
        Err(Error::MalformedRow { line: 3, .. })
    ));
}
