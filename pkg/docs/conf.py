import datetime
import os
import sys

if sys.version_info >= (3, 0):
    import faulthandler
    faulthandler.enable()

sys.path.insert(0, os.path.abspath('.'))

import noetherrazor

# -- General configuration ------------------------------------------------
numfig = False
html_show_sourcelink = False

# Add any Sphinx extension module names here, as strings. They can be
# extensions coming with Sphinx (named 'sphinx.ext.*') or your custom
# ones.
extensions = ['sphinx.ext.autodoc',
              'sphinx.ext.napoleon',
              'sphinx.ext.doctest',
              'sphinx.ext.autosummary',
              'sphinx.ext.mathjax',
              'notfound.extension',
              'sphinx_copybutton',
              'sphinx.ext.coverage',
              'sphinx.ext.intersphinx',
              ]

# Add any paths that contain templates here, relative to this directory.
templates_path = ['_templates']

# The suffix(es) of source filenames.
source_suffix = '.rst'

# The master toctree document.
master_doc = 'index'

# General information about the project.
project = u'noetherrazor'
year = datetime.date.today().year
copyright = u'{}, The noetherrazor Developers'.format(year)
author = u'The noetherrazor Developers'

# The short X.Y version.
version = noetherrazor.__version__

# The full version, including alpha/beta/rc tags.
release = noetherrazor.__version__

language = 'en'

# List of patterns, relative to source directory, that match files and
# directories to ignore when looking for source files.
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store', '**.ipynb_checkpoints']

# The name of the Pygments (syntax highlighting) style to use.
pygments_style = 'friendly'

todo_include_todos = False


# -- Options for HTML output ----------------------------------------------

html_theme = 'pydata_sphinx_theme'
html_copy_source = False
html_show_sphinx = False
html_theme_options = {
    "show_prev_next": False,
    "collapse_navigation": True,
    "navbar_end": ["theme-switcher", "navbar-icon-links"],
}

# Output file base name for HTML help builder.
htmlhelp_basename = 'noetherrazordoc'

intersphinx_mapping = {
    "python": ("https://docs.python.org/3/", None),
    "numpy": ("https://numpy.org/doc/stable", None),
    "pyvista": ('https://docs.pyvista.org/', None),
}

# Nitpick ignores
nitpicky = True
nitpick_ignore = [
    ("py:class", "noetherrazor.gradcore.Node"),
    ("py:class", "pyvista.StructuredGrid"),
]
nitpick_ignore_regex = [
    ("py:class", r"(optional|array_like|callable|shape)"),
]

# -- Custom 404 page

notfound_context = {
    'body': '<h1>Page not found.</h1>\n\nPerhaps try the <a href="usage.html">usage page</a>.',
}
notfound_no_urls_prefix = True
