"""Headless matplotlib access for the report figures."""


def pyplot():
    import matplotlib

    matplotlib.use('Agg')
    matplotlib.rcParams.update({'font.family': 'DejaVu Sans', 'axes.unicode_minus': False,
                                'svg.hashsalt': 'lungtrack'})
    import matplotlib.pyplot as plt

    return plt


def save_figure(fig, path, dpi=100):
    """Save ``fig`` as PNG without a creation timestamp and close it."""
    plt = pyplot()
    fig.savefig(str(path), dpi=dpi, metadata={'Software': None})
    plt.close(fig)
    return path
