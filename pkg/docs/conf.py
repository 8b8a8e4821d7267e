# -*- coding: utf-8 -*-
#
# lungtrack documentation build configuration file.
#
# This file is execfile()d with the current directory set to its containing dir.

import os
import sys

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'tests.settings')
os.environ.setdefault('MPLBACKEND', 'Agg')

sys.path.insert(0, os.path.abspath('..'))

import django  # noqa: E402
django.setup()

# -- General configuration -----------------------------------------------------

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.intersphinx', 'sphinx.ext.viewcode']

source_suffix = '.rst'
master_doc = 'index'

project = u'lungtrack'
copyright = u'lungtrack contributors'

try:
    from lungtrack import __version__
    # The short X.Y version.
    version = '.'.join(__version__.split('.')[:2])
    # The full version, including alpha/beta/rc tags.
    release = __version__
except ImportError:
    version = release = 'dev'

exclude_patterns = ['_build']
pygments_style = 'sphinx'

# -- Options for HTML output ---------------------------------------------------

html_theme = 'classic'
htmlhelp_basename = 'lungtrackdoc'

# -- Options for manual page output --------------------------------------------

man_pages = [
    ('index', 'lungtrack', u'lungtrack Documentation', [u'lungtrack contributors'], 1)
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'torch': ('https://pytorch.org/docs/stable/', None),
    'django': ('https://docs.djangoproject.com/en/stable/',
               'https://docs.djangoproject.com/en/stable/_objects/'),
}
