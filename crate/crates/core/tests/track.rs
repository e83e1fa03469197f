use refclass::forecast::{forecast_case, historic_track, TRACK_LEVELS};
use refclass::panel_store::{FirmYear, VariableKey};
use refclass::selection::{Combination, ForecastCase, SelectorConfig};
use refclass::synthgen::{generate, oracle_pit, GeneratorSpec};

#[test]
fn track_matches_single_forecasts() {
    let gen = generate(&GeneratorSpec::single_signal(60, 1970, 2009, 21)).unwrap();
    let panel = &gen.panel;
    let vars = [VariableKey::OPMAR];
    let cfg = SelectorConfig::rank_deviation(0.05, Combination::Lard, false);
    let records = historic_track(panel, "S07", 1975..=2009, 1, &vars, 10, &cfg).unwrap();
    assert_eq!(records.len(), 35);
    for r in &records {
        // the window needs 10 past years; the last year has no outcome
        assert_eq!(r.quantiles.is_some(), r.year >= 1980, "year {}", r.year);
        assert_eq!(r.realized, panel.forward_growth("S07", r.year, 1));
        assert_eq!(r.realized.is_some(), r.year <= 2008);
        if let Some(q) = r.quantiles {
            assert!(q.windows(2).all(|w| w[0] <= w[1]));
            let case = ForecastCase {
                target: FirmYear::new("S07", r.year),
                horizon: 1,
                reference_variables: vars.to_vec(),
                window: 10,
            };
            let (f, class) = forecast_case(panel, &case, &cfg).unwrap();
            assert_eq!(r.class_size, Some(class.len()));
            for (a, v) in TRACK_LEVELS.iter().zip(q) {
                assert_eq!(f.quantile(*a).unwrap(), v);
            }
        } else {
            assert!(r.skipped.is_some());
        }
    }
}

#[test]
fn track_rejects_unknown_firm() {
    let gen = generate(&GeneratorSpec::single_signal(30, 1990, 2009, 22)).unwrap();
    let cfg = SelectorConfig::market_climate();
    assert!(historic_track(&gen.panel, "ZZZ", 2000..=2001, 1, &[], 5, &cfg).is_err());
}

#[test]
fn realized_quantile_ranks_track_oracle() {
    // class PIT and oracle PIT agree in mean on a signal panel
    let gen = generate(&GeneratorSpec::single_signal(200, 1960, 2009, 23)).unwrap();
    let panel = &gen.panel;
    let cfg = SelectorConfig::rank_deviation(0.05, Combination::Lard, false);
    let mut diffs = Vec::new();
    for firm in ["S000", "S050", "S100", "S150"] {
        for year in 1990..=2008 {
            let case = ForecastCase {
                target: FirmYear::new(firm, year),
                horizon: 1,
                reference_variables: vec![VariableKey::OPMAR],
                window: 20,
            };
            let (f, _) = forecast_case(panel, &case, &cfg).unwrap();
            let g = panel.forward_growth(firm, year, 1).unwrap();
            let oracle = oracle_pit(&gen.sidecar, &case.target, 1, g).unwrap();
            diffs.push((f.pit(g) - oracle).abs());
        }
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!(mean < 0.1, "mean |class PIT - oracle PIT| = {mean}");
}
