import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from cycler import cycler
import numpy as np
import pandas as pd


def gen_color_cycler(style=None, n_colors=4):
    """Generates a custom matplotlib color cycler

    Args:
        style (str, optional): Determines linestyle. If solid, all lines are solid.
        Else, colors repeat once with dashed lines. Defaults to None.
        n_colors (int, optional): Number of colors to cycle through. Defaults to 4.

    Returns:
        cycler: Matplotlib cycle object
    """
    colors = plt.get_cmap('tab10').colors[:n_colors]
    if style == 'solid':
        return cycler(color=colors)
    return (cycler(color=list(colors) * 2) +
            cycler(linestyle=['-'] * n_colors + ['--'] * n_colors))


def load_metrics_log(path):
    """Metrics log (one JSON record per line) as a DataFrame."""
    return pd.read_json(path, lines=True)


def plot_loss_curves(metrics, title=None, save_path=None):
    """Plot l_masked, l_temporal and l_total against step

    Args:
        metrics (DataFrame or str): metrics log rows, or the path to the log.
        title (str, optional): Figure title. Defaults to None.
        save_path (str, optional): if given, the figure is saved there.

    Returns:
        figure, axes
    """
    if isinstance(metrics, str):
        metrics = load_metrics_log(metrics)

    fig, ax = plt.subplots(1, 1, figsize=(6, 4))
    ax.set_prop_cycle(gen_color_cycler(style='solid'))

    for col in ['l_masked', 'l_temporal', 'l_total']:
        if col in metrics.columns and metrics[col].notna().any():
            ax.plot(metrics['step'], metrics[col], linewidth=2.0, label=col)

    ax.set_xlabel('step')
    ax.set_ylabel('loss')
    ax.set_yscale('log')
    ax.legend(frameon=False)
    if title is not None:
        ax.set_title(title)

    if save_path is not None:
        fig.savefig(save_path, bbox_inches='tight')
    return fig, ax


def plot_mask_strip(mask, save_path=None, max_frames=8):
    """Show the first frames of a mask side by side."""
    data = mask.data[..., 0].detach().cpu().numpy() if hasattr(mask, 'data') else np.asarray(mask)
    n = min(max_frames, data.shape[0])
    fig, axes = plt.subplots(1, n, figsize=(1.5 * n, 2), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(data[i], cmap='gray', vmin=0, vmax=1)
        axes[0, i].set_title(str(i), fontsize=8)
        axes[0, i].axis('off')
    if save_path is not None:
        fig.savefig(save_path, bbox_inches='tight')
    return fig, axes
