import os
import os.path
import sys

from invoke import run, task


@task
def clean(ctx):
    run('git clean -Xfd')


@task
def test(ctx, module='all', slow=False):
    print('Python version: ' + sys.version)
    test_cmd = 'coverage run `which django-admin` test --settings=tests.settings'
    module = os.environ.get('MODULE', module)
    if slow:
        os.environ['LUNGTRACK_SLOW_TESTS'] = '1'

    cwp = os.path.dirname(os.path.abspath(__name__))
    pythonpath = os.environ.get('PYTHONPATH', '').split(os.pathsep)
    pythonpath.append(cwp)
    os.environ['PYTHONPATH'] = os.pathsep.join(pythonpath)

    if module == 'all':
        run('{0} tests'.format(test_cmd))
        run('coverage report --include=lungtrack/*')
    elif '{0}.py'.format(module) not in os.listdir('lungtrack'):
        print('There is no lungtrack module {0!r}.'.format(module))
    else:
        run('{0} tests.test_{1}'.format(test_cmd, module))
        run('coverage report -m --include=lungtrack/{0}.py'.format(module))


@task
def experiment(ctx, preset='desk', seed=0, out='lungtrack-run'):
    run('lungtrack -v run --preset {0} --seed {1} --out {2}'.format(preset, seed, out))


@task
def docs(ctx):
    run('cd docs; make html; cd ..')
