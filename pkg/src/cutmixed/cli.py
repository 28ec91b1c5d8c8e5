"""Command line entry points for the experiment harness."""

from __future__ import annotations

import sys

import click

from . import harness


def _cfg(k, levels, gamma_u, pp, geometry, kf, exact_f):
    base_n = 10 if geometry == "ring" else 8
    return harness.ExperimentConfig(
        ks=tuple(k),
        gammas=tuple(gamma_u),
        pp=pp,
        levels=levels,
        geometry=geometry,
        base_n=base_n,
        kf=kf,
        exact_f=exact_f,
    )


@click.group()
def main():
    """Convergence, sparsity and conditioning studies for the unfitted mixed method."""


@main.command("converge-dirichlet")
@click.option("--k", multiple=True, type=int, default=(0, 1), show_default=True)
@click.option("--levels", type=int, default=4, show_default=True)
@click.option("--gamma-u", multiple=True, type=float, default=(0.0, 1.0), show_default=True)
@click.option("--pp", type=click.Choice(["none", "element", "patch"]), default="patch")
@click.option("--geometry", type=click.Choice(["ring", "polygon"]), default="ring")
@click.option("--kf", type=int, default=None)
@click.option("--exact-f", is_flag=True, default=False)
@click.option("--out", type=click.Path(), default="dirichlet.csv", show_default=True)
def converge_dirichlet(k, levels, gamma_u, pp, geometry, kf, exact_f, out):
    cfg = _cfg(k, levels, gamma_u, pp, geometry, kf, exact_f)
    records = harness.run_dirichlet_convergence(cfg)
    harness.write_csv(out, records)
    _echo_rates(records)
    click.echo(f"wrote {out}")


@main.command("converge-neumann")
@click.option("--k", multiple=True, type=int, default=(0, 1), show_default=True)
@click.option("--levels", type=int, default=4, show_default=True)
@click.option("--gamma-u", multiple=True, type=float, default=(1.0,), show_default=True)
@click.option("--pp", type=click.Choice(["none", "element", "patch"]), default="patch")
@click.option("--geometry", type=click.Choice(["ring", "polygon"]), default="ring")
@click.option("--out", type=click.Path(), default="neumann.csv", show_default=True)
def converge_neumann(k, levels, gamma_u, pp, geometry, out):
    cfg = _cfg(k, levels, gamma_u, pp, geometry, None, False)
    records = harness.run_neumann_convergence(cfg)
    harness.write_csv(out, records)
    _echo_rates(records)
    click.echo(f"wrote {out}")


@main.command("f-study")
@click.option("--k", type=int, default=2, show_default=True)
@click.option("--levels", type=int, default=4, show_default=True)
@click.option("--gamma-u", multiple=True, type=float, default=(0.0,), show_default=True)
@click.option("--out", type=click.Path(), default="fapprox.csv", show_default=True)
def f_study(k, levels, gamma_u, out):
    cfg = _cfg((k,), levels, gamma_u, "patch", "ring", None, False)
    records = harness.run_f_study(cfg)
    harness.write_csv(out, records)
    click.echo(f"wrote {out}")


@main.command("cond-sweep")
@click.option("--num", type=int, default=201, show_default=True)
@click.option("--shift-max", type=float, default=0.1, show_default=True)
@click.option("--k", type=int, default=1, show_default=True)
@click.option("--base-n", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(), default="cond.csv", show_default=True)
def cond_sweep(num, shift_max, k, base_n, out):
    rows = harness.run_condition_sweep(shift_max=shift_max, num=num, k=k, base_n=base_n)
    harness.write_cond_csv(out, rows)
    click.echo(f"wrote {out}")


@main.command("sparsity")
@click.option("--k-max", type=int, default=3, show_default=True)
def sparsity(k_max):
    rows = harness.run_sparsity_study(ks=tuple(range(k_max + 1)))
    click.echo("k  ndof(Sigma,Q,total)   V1      V2      V3      V4      V5")
    for row in rows:
        click.echo(
            f"{row['k']}  ({row['ndof_sigma']:3d},{row['ndof_q']:3d},{row['ndof']:3d})"
            f"   {row['V1']:6.2f}  {row['V2']:6.2f}  {row['V3']:6.2f}"
            f"  {row['V4']:6.2f}  {row['V5']:6.2f}"
        )


@main.command("equivalence")
@click.option("--level", type=int, default=1, show_default=True)
@click.option("--k", type=int, default=1, show_default=True)
def equivalence(level, k):
    cfg = harness.ExperimentConfig(ks=(k,), levels=max(2, level + 1))
    report = harness.run_equivalence_check(cfg, level=level, k=k)
    for key, val in report.items():
        click.echo(f"{key}: {val}")


def _echo_rates(records):
    by_key = {}
    for rec in records:
        by_key.setdefault((rec["k"], rec["gammastab"]), []).append(rec)
    for (k, gamma), recs in sorted(by_key.items()):
        recs = sorted(recs, key=lambda r: r["L"])
        errs = [r["ul2error"] for r in recs]
        rates = harness.compute_eoc(errs)
        click.echo(f"k={k} gamma_u={gamma}: ||u-u_h||_Omega EOC {['%.2f' % r for r in rates]}")


if __name__ == "__main__":
    sys.exit(main())
