"""
Visualización de la Curva de Coincidencias
==========================================

Salidas de reproduce_fig4:

- plot_fig4: gráfica PNG (matplotlib, backend Agg) de la media de
  coincidencias frente a fp' con barras de desviación típica
- write_gnuplot: fichero .dat con columnas separadas por espacios para gnuplot

Ejemplo de uso:
-------------
```python
frame = write_fig4_csv(reproduce_fig4(fp_list), "fig4.csv")
plot_fig4(frame, "fig4.png")
write_gnuplot(frame, "fig4.dat")
```
"""

import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("fp_prime", "mean_matches", "stddev")


def _check_frame(frame: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"Faltan columnas: {missing}")
    return frame.sort_values("fp_prime")


def _ensure_dir(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def plot_fig4(frame: pd.DataFrame, path: str, title: str = "Coincidencias por búsqueda (PVault con 100 registros)") -> str:
    """Guarda la curva media ± desviación; devuelve la ruta escrita"""
    frame = _check_frame(frame)
    _ensure_dir(path)

    fig, ax = plt.subplots(figsize=(8, 5))
    ax.errorbar(frame["fp_prime"], frame["mean_matches"], yerr=frame["stddev"],
                fmt="o-", capsize=3, color="tab:blue", label="media ± sd")
    ax.set_xlabel("fp' = 2^(-k*/2)")
    ax.set_ylabel("Filtros coincidentes")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)

    logger.info("Gráfica escrita en %s (%d puntos)", path, len(frame))
    return path


def write_gnuplot(frame: pd.DataFrame, path: str) -> str:
    """fp_prime mean_matches stddev [trials], una fila por punto, cabecera con #"""
    frame = _check_frame(frame)
    _ensure_dir(path)
    columns = [c for c in ("fp_prime", "mean_matches", "stddev", "trials") if c in frame.columns]
    with open(path, "w") as f:
        f.write("# " + " ".join(columns) + "\n")
        for row in frame[columns].itertuples(index=False):
            f.write(" ".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row) + "\n")
    return path
