from setuptools import setup

setup(name='pfedbred',
      version='1.0',
      description='Personalized federated learning simulator with '
                  'Bregman-Moreau envelopes',
      license='LGPL',
      py_modules=['algorithms', 'bregman', 'data', 'federation', 'metrics',
                  'models', 'param_space', 'pfedbred', 'traitdefs'],
      data_files=[('', ['pfedbred.ini'])],
      python_requires='>=3.7',
      install_requires=['numpy>=1.17', 'traits>=6.1', 'tqdm'],
      extras_require={'test': ['pytest>=7']},
      entry_points={'console_scripts': ['pfedbred = pfedbred:main']})
