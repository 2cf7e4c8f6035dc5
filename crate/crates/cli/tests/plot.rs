use seqrl_cli::plot::{moving_average, plot, read_series, render_svg, PlotError, Series};

fn polyline_points(svg: &str) -> Vec<(f64, f64)> {
    let doc = roxmltree::Document::parse(svg).expect("well-formed XML");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
    assert_eq!(lines.len(), 1);
    lines[0]
        .attribute("points")
        .unwrap()
        .split_whitespace()
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

#[test]
fn two_points_give_one_two_point_polyline() {
    let svg = render_svg(&Series { xs: vec![0.0, 1.0], ys: vec![1.0, 3.0] }, "step", "return");
    let pts = polyline_points(&svg);
    assert_eq!(pts.len(), 2);
    assert!(pts[0].0 < pts[1].0);
    // higher value is drawn higher up
    assert!(pts[1].1 < pts[0].1);
    assert!(svg.contains(">step<") && svg.contains(">return<"));
}

#[test]
fn constant_series_is_horizontal_and_padded() {
    let svg = render_svg(&Series { xs: vec![1.0, 2.0, 3.0], ys: vec![5.0; 3] }, "step", "loss");
    let pts = polyline_points(&svg);
    assert!(pts.iter().all(|p| p.1 == pts[0].1));
    // the line sits mid-plot, inside the axis band
    assert!(pts[0].1 > 30.0 && pts[0].1 < 350.0);
    assert!(svg.contains(">4<") && svg.contains(">6<"), "{svg}");
}

#[test]
fn moving_average_rules() {
    let ys = [1.0, 5.0, -2.0, 8.0];
    assert_eq!(moving_average(&ys, 1).unwrap(), ys.to_vec());
    assert_eq!(moving_average(&ys, 2).unwrap(), vec![1.0, 3.0, 1.5, 3.0]);
    assert!(matches!(moving_average(&ys, 0), Err(PlotError::Window)));
}

#[test]
fn reads_columns_and_skips_blanks() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    std::fs::write(&csv, "step,episode,return,loss\n3,0,1.5,\n7,1,,0.2\n9,2,-1,0.1\n").unwrap();
    let s = read_series(&csv, "return").unwrap();
    assert_eq!(s, Series { xs: vec![3.0, 9.0], ys: vec![1.5, -1.0] });
    assert!(matches!(read_series(&csv, "kills"), Err(PlotError::MissingColumn(_))));
    std::fs::write(&csv, "step,return\n").unwrap();
    assert!(matches!(read_series(&csv, "return"), Err(PlotError::Empty(_))));

    std::fs::write(&csv, "step,return\n1,2\n2,4\n3,<&>\n").unwrap();
    assert!(matches!(read_series(&csv, "return"), Err(PlotError::Value { line: 4, .. })));
    std::fs::write(&csv, "step,a<b\n1,2\n2,4\n").unwrap();
    let out = dir.path().join("p.svg");
    plot(&csv, "a<b", 2, &out).unwrap();
    let svg = std::fs::read_to_string(&out).unwrap();
    assert_eq!(polyline_points(&svg).len(), 2);
}
