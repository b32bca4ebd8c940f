from .plotter import gen_color_cycler, load_metrics_log, plot_loss_curves, plot_mask_strip
