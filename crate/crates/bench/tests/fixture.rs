use slp_smpc::controller::build_initial_socp;

#[test]
fn hvac_fixture_builds_the_initial_program() {
    let cache = tempfile::tempdir().unwrap();
    std::env::set_var(slp_smpc::terminal::CACHE_DIR_ENV, cache.path());
    let (sc, design) = slp_smpc_bench::hvac_design().unwrap();
    assert_eq!((design.terminal_set.nu, design.terminal_set.mu), (52, 56));
    let (prog, _) = build_initial_socp(&sc, &sc.x0, &design.ingredients, &design.terminal_set).unwrap();
    assert!(prog.num_vars() > 0);
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 1);
}
