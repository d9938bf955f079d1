use guwen_core::eval::{aggregate_sheets, make_eval_sheets, EvalSheet, KeyRow, SystemOutputs};
use std::collections::BTreeMap;

const TASKS: [&str; 4] = ["AMCT", "CPG22", "CPG13", "CCG"];

/// Published per-task (syntactic, semantic) means of the human study.
fn published() -> Vec<(&'static str, [(f64, f64); 4])> {
    vec![
        (
            "std-transformer",
            [(0.63, 0.58), (0.69, 0.60), (0.63, 0.52), (0.61, 0.59)],
        ),
        (
            "bert-base",
            [(0.69, 0.61), (0.72, 0.64), (0.67, 0.54), (0.63, 0.62)],
        ),
        (
            "domain-bert",
            [(0.71, 0.62), (0.73, 0.65), (0.69, 0.55), (0.65, 0.63)],
        ),
    ]
}

/// Builds 10 sheets per task and fills them so each cell hits its published mean.
fn filled_study() -> (Vec<EvalSheet>, Vec<KeyRow>) {
    let systems = published();
    let mut sheets = Vec::new();
    let mut key = Vec::new();
    for (t, task) in TASKS.iter().enumerate() {
        let sources: Vec<String> = (0..30).map(|i| format!("src{i}")).collect();
        let outputs: Vec<SystemOutputs> = systems
            .iter()
            .enumerate()
            .map(|(n, (name, _))| SystemOutputs {
                system: name.to_string(),
                generations: (0..30).map(|i| format!("gen{n}-{i}")).collect(),
            })
            .collect();
        let (mut s, k) = make_eval_sheets(task, &sources, &outputs, 20, 10, 40 + t as u64).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|sheet| sheet.rows.len() == 60));
        let mut ones: BTreeMap<&str, (usize, usize)> = systems
            .iter()
            .map(|(name, cells)| {
                (
                    *name,
                    (
                        (cells[t].0 * 200.0).round() as usize,
                        (cells[t].1 * 200.0).round() as usize,
                    ),
                )
            })
            .collect();
        let system_of: BTreeMap<&str, &str> = k
            .iter()
            .map(|r| (r.row_id.as_str(), r.system.as_str()))
            .collect();
        for sheet in &mut s {
            for row in &mut sheet.rows {
                let left = ones.get_mut(system_of[row.row_id.as_str()]).unwrap();
                row.syntactic = Some(u8::from(left.0 > 0));
                row.semantic = Some(u8::from(left.1 > 0));
                left.0 = left.0.saturating_sub(1);
                left.1 = left.1.saturating_sub(1);
            }
        }
        sheets.extend(s);
        key.extend(k);
    }
    (sheets, key)
}

#[test]
fn published_cells_reproduce_the_published_averages() {
    let (sheets, key) = filled_study();
    let table = aggregate_sheets(&sheets, &key).unwrap();
    for (name, cells) in published() {
        for (t, task) in TASKS.iter().enumerate() {
            let m = table.cells[&(name.to_string(), task.to_string())];
            assert_eq!(m.ratings, 200);
            assert!((m.syntactic - cells[t].0).abs() < 1e-12);
            assert!((m.semantic - cells[t].1).abs() < 1e-12);
        }
        let mean8 = cells.iter().map(|c| c.0 + c.1).sum::<f64>() / 8.0;
        assert!((table.averages[name] - mean8).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&table.averages[name]));
    }
    assert!((table.averages["domain-bert"] - 0.65375).abs() < 1e-12);
    assert_eq!(format!("{:.2}", table.averages["domain-bert"]), "0.65");
    assert_eq!(format!("{:.2}", table.averages["bert-base"]), "0.64");
    assert_eq!(format!("{:.2}", table.averages["std-transformer"]), "0.61");
    assert!(table.to_tsv().contains("domain-bert\taverage\t0.65"));
}

#[test]
fn sheets_round_trip_through_tsv() {
    let (sheets, key) = filled_study();
    let parsed: Vec<EvalSheet> = sheets
        .iter()
        .map(|s| EvalSheet::parse(&s.id, &s.to_tsv()).unwrap())
        .collect();
    assert_eq!(parsed, sheets);
    let k = guwen_core::eval::parse_key(&guwen_core::eval::key_to_tsv(&key)).unwrap();
    assert_eq!(k, key);
    // Sheets never reveal which system produced a row.
    for s in &sheets {
        let tsv = s.to_tsv();
        assert!(!tsv.contains("bert") && !tsv.contains("transformer"));
    }
}
