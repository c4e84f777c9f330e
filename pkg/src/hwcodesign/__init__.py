"""Hardware-aware LLM architecture co-design: loss law, roofline costs, regimes, optima, frontiers."""
