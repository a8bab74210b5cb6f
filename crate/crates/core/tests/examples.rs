macro_rules! example {
    ($name:ident, $file:literal) => {
        #[allow(dead_code)]
        #[path = $file]
        mod $name;

        #[test]
        fn $name() {
            $name::run_example().unwrap();
        }
    };
}

example!(cli_config, "../examples/cli_config.rs");
example!(compound_poisson, "../examples/compound_poisson.rs");
example!(galerkin_spectral, "../examples/galerkin_spectral.rs");
example!(galerkin_steering, "../examples/galerkin_steering.rs");
example!(hormander_brackets, "../examples/hormander_brackets.rs");
example!(invariant_measure, "../examples/invariant_measure.rs");
example!(kalman_chain, "../examples/kalman_chain.rs");
example!(maximal_coupling, "../examples/maximal_coupling.rs");
example!(mixing_curve, "../examples/mixing_curve.rs");
example!(oscillator_network, "../examples/oscillator_network.rs");
example!(shooting_coupling, "../examples/shooting_coupling.rs");
