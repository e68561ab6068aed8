"""Compare the model's ranking of G=8 grids with counter-based cost from
simulated training runs."""

from scipy.stats import spearmanr

from plexuskit import perf_model as pm
from plexuskit.graph_prep import prepare, synth_dataset
from plexuskit.grid import enumerate_configs, make_grid
from plexuskit.trainer import TrainConfig, train_epochs


def main():
    ds = synth_dataset("sbm", dict(nodes=512, communities=8, p_in=0.05, p_out=0.005, features=64,
                                   classes=8), seed=3)
    g = prepare(ds, seed=1)
    cfg = TrainConfig(layers=3, hidden=64, epochs=1, precision="f32")
    machine = pm.MachineParams()
    stats = pm.stats_from_graph(g, 64, 3)
    pred, sim = [], []
    for dims in enumerate_configs(8):
        res = train_epochs(g, make_grid(*dims), cfg)
        pred.append(pm.predict(dims, stats, machine, pm.PerfCoefficients()).total)
        sim.append(pm.harness_cost(res.stats, dims, machine))
        print(f"{','.join(map(str, dims)):>8} model {pred[-1]:.3e}  simulated {sim[-1]:.3e}")
    print(f"Spearman {spearmanr(pred, sim).statistic:.3f}")


if __name__ == "__main__":
    main()
