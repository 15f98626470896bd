"""Console formatting - status lines, metric tables, number styling."""

import math
from typing import Iterable, Optional, Sequence

from rich.table import Table
from rich.text import Text


class Colors:
    """Color scheme using Rich style names."""
    RESET = "default"
    BOLD = "bold"
    DIM = "dim white"

    # Rows
    BASELINE = "bright_yellow"
    MODEL = "bright_green"
    HEADER = "bright_cyan"

    # Outcomes
    PASS = "bright_green"
    FAIL = "bright_red"
    WARN = "bright_magenta"


def print_status(message: str, status: str = "info"):
    """Print a status message with color."""
    if status == "success":
        print(f"\033[32m✓\033[0m {message}")
    elif status == "error":
        print(f"\033[31m✗\033[0m {message}")
    else:
        print(f"\033[36m→\033[0m {message}")


def format_number(value: float, digits: int = 4) -> str:
    """Fixed-point for ordinary magnitudes, scientific for tiny or huge ones."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if math.isinf(value):
        return "inf"
    if value != 0 and (abs(value) < 10 ** -digits or abs(value) >= 1e6):
        return f"{value:.3e}"
    return f"{value:.{digits}f}"


def format_residual(residual: float, tol: float = 1e-4) -> Text:
    """Constraint residual, red when it exceeds the tolerance."""
    style = Colors.PASS if residual < tol else Colors.FAIL
    return Text(f"{residual:.2e}", style=style)


def _row_style(label: str) -> str:
    return Colors.BASELINE if label.upper() in ("MEAN", "HA") else Colors.MODEL


def metrics_table(rows: Sequence, title: str = "Metrics", tol: float = 1e-4) -> Table:
    """Table of ``(label, MetricsReport)`` pairs with RMSE / MAE / MAPE columns."""
    table = Table(title=title, header_style=Colors.HEADER)
    table.add_column("Method")
    for name in ("RMSE", "MAE", "MAPE"):
        table.add_column(name, justify="right")
    table.add_column("Residual", justify="right")
    for label, report in rows:
        table.add_row(
            Text(label, style=_row_style(label)),
            format_number(report.rmse),
            format_number(report.mae),
            format_number(report.mape),
            format_residual(report.constraint_residual, tol),
        )
    return table


def comparison_table(rows: Iterable, title: str = "Two-stage vs end-to-end") -> Table:
    table = Table(title=title, header_style=Colors.HEADER)
    table.add_column("Mode")
    for name in ("RMSE", "MAE", "MAPE", "Val loss @1", "Best val loss"):
        table.add_column(name, justify="right")
    for row in rows:
        table.add_row(
            Text(row.label, style=Colors.MODEL),
            format_number(row.report.rmse),
            format_number(row.report.mae),
            format_number(row.report.mape),
            format_number(row.first_val_loss, 6),
            format_number(row.best_val_loss, 6),
        )
    return table


def gradcheck_table(results: Iterable) -> Table:
    table = Table(title="Gradient checks", header_style=Colors.HEADER)
    table.add_column("Check")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Coords", justify="right")
    table.add_column("Result")
    for r in results:
        outcome = Text("pass", style=Colors.PASS) if r.passed else Text("FAIL", style=Colors.FAIL)
        table.add_row(r.name, format_number(r.max_rel_error), str(r.n_coords), outcome)
    return table


def loss_table(losses: Sequence[float], title: str, val: Optional[Sequence[float]] = None) -> Table:
    """Per-epoch loss trace."""
    table = Table(title=title, header_style=Colors.HEADER)
    table.add_column("Epoch", justify="right")
    table.add_column("Loss", justify="right")
    if val is not None:
        table.add_column("Val loss", justify="right")
    for i, loss in enumerate(losses):
        cells = [str(i + 1), format_number(loss, 6)]
        if val is not None:
            cells.append(format_number(val[i], 6))
        table.add_row(*cells)
    return table
