use phyloembed::acceptance::{run_all, AcceptanceConfig};

#[test]
fn acceptance_suite() {
    let reports =
        run_all(&AcceptanceConfig::default(), |r| println!("{r}")).expect("acceptance run");
    assert_eq!(reports.len(), 12);
    let failed: Vec<usize> = reports.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    println!("{} of 12 criteria passed", 12 - failed.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
