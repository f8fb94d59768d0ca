"""Plot P_timely against the swept value, one series per method.

Usage: python scripts/plot_sweep.py aggregated.csv [out.png]
"""

import sys

import matplotlib.pyplot as plt

from subnetra import sweep


def plot(aggregated_path, out_path=None):
    table = sweep.read_csv(aggregated_path)
    table["value"] = table["value"].astype(float)
    fig, ax = plt.subplots()
    for method, members in table.groupby("method", sort=False):
        members = members.sort_values("value")
        ax.errorbar(
            members["value"],
            members["P_timely_mean"],
            yerr=members["P_timely_ci95"],
            marker="o",
            capsize=3,
            label=method,
        )
    ax.set_xlabel(table["sweep_key"].iloc[0] if len(table) else "value")
    ax.set_ylabel("P_timely")
    ax.legend()
    if out_path:
        fig.savefig(out_path, dpi=150, bbox_inches="tight")
    else:
        plt.show()


if __name__ == "__main__":
    plot(*sys.argv[1:3])
