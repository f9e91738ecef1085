use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avod_core::anchor_grid::{default_anchor_sizes, generate_anchor_grid};
use avod_core::bev::{BevExtents, BevGrid};
use avod_core::kitti_io::{filter_fov, read_calibration, read_ground_plane, read_point_cloud, LidarPoint, PointCloud};

fn fixture_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/kitti")
}

fn avod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avod")).args(args).output().expect("binary runs")
}

fn avod_ok(args: &[&str]) -> String {
    let out = avod(args);
    assert!(out.status.success(), "avod {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn data_root_arg(root: &Path) -> String {
    format!("data_root={}", root.display())
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn bev_matches_golden_checksums() {
    let out = tempfile::tempdir().unwrap();
    let root = fixture_root();
    avod_ok(&["bev", "--set", &data_root_arg(&root), "--output", out.path().to_str().unwrap()]);

    let golden = read(&root.parent().unwrap().join("golden_bev_000008.csv"));
    let mut lines = golden.lines();
    let points = lines.next().unwrap().strip_prefix("points,").unwrap();
    let in_view = lines.next().unwrap().strip_prefix("in_view,").unwrap();
    assert_eq!(read(&out.path().join("bev_counts.csv")), format!("frame,points,in_view\n000008,{points},{in_view}\n"));

    let stats = read(&out.path().join("bev_stats.csv"));
    let got: Vec<Vec<&str>> = stats.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let want: Vec<Vec<&str>> = lines.skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(got.len(), 6);
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g[1], w[0], "channel");
        assert_eq!(g[2], w[1], "nonzero cells of channel {}", w[0]);
        let (gs, ws): (f64, f64) = (g[3].parse().unwrap(), w[2].parse().unwrap());
        assert!((gs - ws).abs() < 1e-5, "channel {} sum {gs} vs {ws}", w[0]);
    }
    for ch in 0..6 {
        assert!(out.path().join(format!("bev/000008_ch{ch}.pgm")).exists());
    }
}

fn write_frame(root: &Path, id: &str, points: &[LidarPoint]) {
    for sub in ["velodyne", "calib"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    std::fs::write(root.join(format!("velodyne/{id}.bin")), PointCloud::new(points.to_vec()).to_bytes()).unwrap();
    std::fs::copy(fixture_root().join("calib/000008.txt"), root.join(format!("calib/{id}.txt"))).unwrap();
}

#[test]
fn empty_frame_gives_zero_dumps() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_frame(data.path(), "000001", &[]);
    let stdout = avod_ok(&["bev", "--set", &data_root_arg(data.path()), "--output", out.path().to_str().unwrap()]);
    assert_eq!(stdout, "000001 points=0 in_view=0 nonzero=0,0,0,0,0,0\n");
    assert_eq!(read(&out.path().join("bev_counts.csv")), "frame,points,in_view\n000001,0,0\n");
    for ch in 0..6 {
        let pgm = std::fs::read(out.path().join(format!("bev/000001_ch{ch}.pgm"))).unwrap();
        let header = b"P5\n800 700\n65535\n";
        assert!(pgm.starts_with(header));
        assert!(pgm[header.len()..].iter().all(|&b| b == 0));
    }
}

#[test]
fn bad_path_fails_with_message() {
    let out = tempfile::tempdir().unwrap();
    let res = avod(&["bev", "--set", "data_root=/definitely/not/here", "--output", out.path().to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(res.stdout.is_empty());
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error:"));

    let res = avod(&["bev", "--frames", "5", "--set", &data_root_arg(&fixture_root()), "--output", out.path().to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("000005.bin"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "bev_resolution = 0.1\nanchor_strde = 0.5\n").unwrap();
    let res = avod(&["netinfo", "--config", cfg.to_str().unwrap(), "--output", dir.path().to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("anchor_strde"));
    let res = avod(&["netinfo", "--set", "height_slices=0", "--output", dir.path().to_str().unwrap()]);
    assert!(!res.status.success());
}

#[test]
fn outputs_are_identical_across_runs_and_pool_sizes() {
    let data = tempfile::tempdir().unwrap();
    let root = fixture_root();
    for id in ["000001", "000002", "000003"] {
        for (sub, ext) in [("velodyne", "bin"), ("calib", "txt"), ("planes", "txt"), ("label_2", "txt")] {
            std::fs::create_dir_all(data.path().join(sub)).unwrap();
            std::fs::copy(root.join(format!("{sub}/000008.{ext}")), data.path().join(format!("{sub}/{id}.{ext}"))).unwrap();
        }
    }
    let mut snapshots = Vec::new();
    for jobs in ["1", "4", "4"] {
        let out = tempfile::tempdir().unwrap();
        let o = out.path().to_str().unwrap();
        let d = data_root_arg(data.path());
        avod_ok(&["bev", "--jobs", jobs, "--set", &d, "--output", o]);
        avod_ok(&["anchors", "--jobs", jobs, "--set", &d, "--output", o, "--classes", "car,cyclist"]);
        avod_ok(&["encode", "--jobs", jobs, "--set", &d, "--output", o]);
        snapshots.push(snapshot(out.path()));
    }
    assert!(snapshots[0].len() > 20);
    assert_eq!(snapshots[0], snapshots[1]);
    assert_eq!(snapshots[1], snapshots[2]);
}

fn anchor_counts(csv: &str) -> Vec<(String, usize, usize)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn anchors_of_empty_and_dense_clouds() {
    let small = ["--set", "bev_x_max=10", "--set", "bev_y_min=-5", "--set", "bev_y_max=5", "--set", "fov_crop=false"];
    let data = tempfile::tempdir().unwrap();
    write_frame(data.path(), "000000", &[]);
    // one point at every anchor position
    let dense: Vec<LidarPoint> =
        (0..20).flat_map(|i| (0..20).map(move |j| LidarPoint::new(0.25 + 0.5 * i as f32, -4.75 + 0.5 * j as f32, -1.0, 0.0))).collect();
    write_frame(data.path(), "000001", &dense);
    let out = tempfile::tempdir().unwrap();
    let d = data_root_arg(data.path());
    let mut args = vec!["anchors", "--set", &d, "--output", out.path().to_str().unwrap(), "--classes", "car,pedestrian"];
    args.extend(small);
    avod_ok(&args);
    let counts = anchor_counts(&read(&out.path().join("anchor_counts.csv")));
    assert_eq!(counts, vec![
        ("car".into(), 1600, 0),
        ("pedestrian".into(), 800, 0),
        ("car".into(), 1600, 1600),
        ("pedestrian".into(), 800, 800),
    ]);
    let kept = read(&out.path().join("anchors/000001_car.csv"));
    assert_eq!(kept.lines().count(), 1601);
}

#[test]
fn fixture_anchor_counts_match_naive_filter() {
    let root = fixture_root();
    let out = tempfile::tempdir().unwrap();
    avod_ok(&["anchors", "--set", &data_root_arg(&root), "--output", out.path().to_str().unwrap(), "--classes", "car,pedestrian,cyclist"]);
    let counts = anchor_counts(&read(&out.path().join("anchor_counts.csv")));

    let calib = read_calibration(root.join("calib/000008.txt")).unwrap();
    let plane = read_ground_plane(root.join("planes/000008.txt")).unwrap().to_lidar(&calib.lidar_to_rect());
    let extents = BevExtents::default();
    let grid = BevGrid::new(extents, 0.1).unwrap();
    let cloud = filter_fov(&read_point_cloud(root.join("velodyne/000008.bin")).unwrap(), &calib, (1242.0, 375.0), &extents);
    let cells: Vec<(i64, i64)> =
        cloud.points.iter().map(|p| (((p.y as f64 + 40.0) / 0.1).floor() as i64, (p.x as f64 / 0.1).floor() as i64)).collect();
    for (class, total, kept) in counts {
        let anchors = generate_anchor_grid(&extents, 0.5, &default_anchor_sizes(&class).unwrap(), &plane).unwrap();
        assert_eq!(anchors.len(), total);
        let naive = anchors
            .iter()
            .filter(|a| {
                let c0 = ((a.ty - a.dy / 2.0 + 40.0) / 0.1).floor().max(0.0) as i64;
                let c1 = (((a.ty + a.dy / 2.0 + 40.0) / 0.1).ceil() as i64).min(grid.width as i64);
                let r0 = ((a.tx - a.dx / 2.0) / 0.1).floor().max(0.0) as i64;
                let r1 = (((a.tx + a.dx / 2.0) / 0.1).ceil() as i64).min(grid.height as i64);
                cells.iter().any(|&(c, r)| c >= c0 && c < c1 && r >= r0 && r < r1)
            })
            .count();
        assert_eq!(kept, naive, "{class}");
    }
}

fn label_line(class: &str, loc: [f64; 3], ry: f64, score: Option<f64>) -> String {
    let mut s = format!("{class} 0.00 0 0.00 100.00 100.00 200.00 200.00 1.50 1.60 3.90 {} {} {} {ry}", loc[0], loc[1], loc[2]);
    if let Some(v) = score {
        s.push_str(&format!(" {v}"));
    }
    s + "\n"
}

fn eval_table(out: &Path) -> Vec<(String, String, f64, f64)> {
    read(&out.join("eval_summary.csv"))
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f[4].parse().unwrap(), f[5].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_of_ground_truth_and_empty_detections() {
    let root = fixture_root();
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let gt = root.join("label_2");
    avod_ok(&["eval", "--set", &data_root_arg(&root), "--output", o, "--detections", gt.to_str().unwrap(), "--classes", "car,pedestrian,cyclist"]);
    let table = eval_table(out.path());
    assert_eq!(table.len(), 9);
    assert!(table.iter().all(|r| r.2 == 100.0 && r.3 == 100.0), "{table:?}");

    let empty = tempfile::tempdir().unwrap();
    avod_ok(&["eval", "--set", &data_root_arg(&root), "--output", o, "--detections", empty.path().to_str().unwrap()]);
    let table = eval_table(out.path());
    assert!(table.iter().all(|r| r.2 == 0.0 && r.3 == 0.0), "{table:?}");
}

#[test]
fn eval_of_micro_dataset_matches_hand_computed_table() {
    let data = tempfile::tempdir().unwrap();
    let gt_dir = data.path().join("gt");
    let det_dir = data.path().join("det");
    std::fs::create_dir_all(&gt_dir).unwrap();
    std::fs::create_dir_all(&det_dir).unwrap();
    std::fs::write(
        gt_dir.join("000000.txt"),
        label_line("Car", [0.0, 1.7, 10.0], 0.0, None) + &label_line("Car", [5.0, 1.7, 20.0], 0.5, None),
    )
    .unwrap();
    // hit, false positive, hit with reversed heading
    std::fs::write(
        det_dir.join("000000.txt"),
        label_line("Car", [0.0, 1.7, 10.0], 0.0, Some(0.9))
            + &label_line("Car", [-5.0, 1.7, 30.0], 0.0, Some(0.8))
            + &label_line("Car", [5.0, 1.7, 20.0], 0.5 - std::f64::consts::PI, Some(0.7)),
    )
    .unwrap();
    // precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1; heading precision 1, 1/2, 1/3
    let expected = [("11", 100.0 * (6.0 + 5.0 * 2.0 / 3.0) / 11.0, 100.0 * (6.0 + 5.0 / 3.0) / 11.0), ("40", 100.0 * (20.0 + 20.0 * 2.0 / 3.0) / 40.0, 100.0 * (20.0 + 20.0 / 3.0) / 40.0)];
    for (mode, ap, ahs) in expected {
        let out = tempfile::tempdir().unwrap();
        avod_ok(&[
            "eval",
            "--set",
            &format!("interpolation={mode}"),
            "--output",
            out.path().to_str().unwrap(),
            "--detections",
            det_dir.to_str().unwrap(),
            "--gt",
            gt_dir.to_str().unwrap(),
        ]);
        for (_, level, got_ap, got_ahs) in eval_table(out.path()) {
            assert!((got_ap - ap).abs() < 1e-4, "{mode} {level}: AP {got_ap} vs {ap}");
            assert!((got_ahs - ahs).abs() < 1e-4, "{mode} {level}: AHS {got_ahs} vs {ahs}");
        }
    }
}

#[test]
fn recall_curves() {
    let data = tempfile::tempdir().unwrap();
    let gt_dir = data.path().join("gt");
    let prop_dir = data.path().join("props");
    std::fs::create_dir_all(&gt_dir).unwrap();
    std::fs::create_dir_all(&prop_dir).unwrap();
    std::fs::write(gt_dir.join("000000.txt"), label_line("Car", [0.0, 1.7, 10.0], 0.0, None)).unwrap();
    // only the third-ranked proposal covers the object
    std::fs::write(
        prop_dir.join("000000.txt"),
        label_line("Car", [10.0, 1.7, 10.0], 0.0, Some(0.9))
            + &label_line("Car", [-10.0, 1.7, 10.0], 0.0, Some(0.8))
            + &label_line("Car", [0.2, 1.7, 10.1], 0.1, Some(0.7)),
    )
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    let run = |props: &Path| {
        avod_ok(&[
            "recall",
            "--set",
            "recall_n=1,2,3,10",
            "--set",
            "recall_nms=false",
            "--output",
            out.path().to_str().unwrap(),
            "--proposals",
            props.to_str().unwrap(),
            "--gt",
            gt_dir.to_str().unwrap(),
        ]);
        read(&out.path().join("recall_car.csv"))
    };
    assert_eq!(run(&prop_dir), "n,recall\n1,0\n2,0\n3,1\n10,1\n");
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(run(empty.path()), "n,recall\n1,0\n2,0\n3,0\n10,0\n");
    assert_eq!(run(&gt_dir), "n,recall\n1,1\n2,1\n3,1\n10,1\n");
}

#[test]
fn netinfo_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let stdout = avod_ok(&["netinfo", "--output", o]);
    assert!(stdout.contains("= 5017600000 bytes"));
    let csv = read(&dir.path().join("netinfo.csv"));
    assert!(csv.lines().last().unwrap().ends_with(",5017600000"));
    assert!(csv.contains("encoder,12,conv3x3 256 256,88x100x256,88x100x256,"));

    let empty = dir.path().join("empty.net");
    std::fs::write(&empty, "").unwrap();
    avod_ok(&["netinfo", "--set", &format!("network_file={}", empty.display()), "--output", o]);
    let csv = read(&dir.path().join("netinfo.csv"));
    assert_eq!(csv.lines().nth(1).unwrap(), "total,,,,,0,0");

    let toy = dir.path().join("toy.net");
    std::fs::write(&toy, "branch.toy = input\nlayer.toy.0 = conv3x3 6 8\nlayer.toy.1 = maxpool2x 8 8\nlayer.toy.2 = fc 512 4\n").unwrap();
    avod_ok(&["netinfo", "--set", &format!("network_file={}", toy.display()), "--set", "network_input=16x16", "--output", o]);
    // conv: 9*6*8 + 8 weights, 2*9*6*8 per output pixel; fc: 512*4 + 4 weights
    assert_eq!(
        read(&dir.path().join("netinfo.csv")),
        "branch,index,layer,input,output,params,flops\n\
         toy,0,conv3x3 6 8,16x16x6,16x16x8,440,221184\n\
         toy,1,maxpool2x 8 8,16x16x8,8x8x8,0,0\n\
         toy,2,fc 512 4,8x8x8,1x1x4,2052,4096\n\
         total,,,,,2492,225280\n\
         memory_estimate,100000,7x7,256,4,5017600000\n"
    );
}

#[test]
fn cluster_single_center_is_mean_dimension() {
    let root = fixture_root();
    let out = tempfile::tempdir().unwrap();
    avod_ok(&["cluster", "--set", &data_root_arg(&root), "--set", "cluster_k_car=1", "--output", out.path().to_str().unwrap()]);
    let labels = read(&root.join("label_2/000008.txt"));
    let cars: Vec<Vec<f64>> = labels
        .lines()
        .filter(|l| l.starts_with("Car "))
        .map(|l| l.split_whitespace().skip(8).take(3).map(|v| v.parse().unwrap()).collect())
        .collect();
    let mean = |k: usize| cars.iter().map(|d| d[k]).sum::<f64>() / cars.len() as f64;
    let csv = read(&out.path().join("clusters.csv"));
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..2], ["car", "0"]);
    // label dims are h w l; cluster dims are l w h
    for (col, k) in [(2, 2), (3, 1), (4, 0)] {
        assert!((row[col].parse::<f64>().unwrap() - mean(k)).abs() < 1e-9);
    }
}
